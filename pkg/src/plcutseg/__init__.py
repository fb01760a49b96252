"""Self- and semi-supervised polyp segmentation with translated synthetic data."""

from .core import (
    ContractError,
    LossValue,
    confidence_mask,
    dice_loss,
    dice_score,
    iou,
    mixup_pair,
    sample_mixup_lambda,
)

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "LossValue",
    "confidence_mask",
    "dice_loss",
    "dice_score",
    "iou",
    "mixup_pair",
    "sample_mixup_lambda",
]
