"""Mask and loss arithmetic shared by the whole pipeline.

Masks are torch tensors of shape ``(H, W)`` (or ``(..., H, W)`` for the
batched helpers) holding soft polyp probabilities in ``[0, 1]``.  Validity
masks are boolean tensors of the same shape.  Images are ``(3, H, W)``
tensors, either raw in ``[0, 1]`` or normalized to ``[-1, 1]`` with the
(0.5, 0.5, 0.5) mean/std scheme.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np
import torch

DEFAULT_SMOOTHING = 1.0
EVAL_THRESHOLD = 0.5
NORM_MEAN = (0.5, 0.5, 0.5)
NORM_STD = (0.5, 0.5, 0.5)


class ContractError(ValueError):
    """Raised when an operation is called with inputs violating its contract."""


def _check_same_shape(*tensors: torch.Tensor) -> None:
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ContractError(f"shape mismatch: {tuple(shape)} vs {tuple(t.shape)}")


def assert_seg_mask(mask: torch.Tensor, hard: bool = False, atol: float = 0.0) -> None:
    """Check the SegMask invariants (values in [0, 1], optionally in {0, 1})."""
    if mask.dim() < 2 or mask.shape[-1] == 0 or mask.shape[-2] == 0:
        raise ContractError(f"mask must be at least 2-D and non-empty, got {tuple(mask.shape)}")
    lo, hi = float(mask.min()), float(mask.max())
    if lo < -atol or hi > 1.0 + atol:
        raise ContractError(f"mask values outside [0, 1]: min={lo}, max={hi}")
    if hard and not torch.all((mask == 0) | (mask == 1)):
        raise ContractError("hard mask must only contain 0 and 1")


def normalize(image: torch.Tensor) -> torch.Tensor:
    """Map a raw ``[0, 1]`` image to ``[-1, 1]``."""
    mean = image.new_tensor(NORM_MEAN).view(-1, 1, 1)
    std = image.new_tensor(NORM_STD).view(-1, 1, 1)
    return (image - mean) / std


def denormalize(image: torch.Tensor) -> torch.Tensor:
    mean = image.new_tensor(NORM_MEAN).view(-1, 1, 1)
    std = image.new_tensor(NORM_STD).view(-1, 1, 1)
    return image * std + mean


@dataclass
class LossValue:
    """A scalar loss together with its named, weighted sub-terms.

    ``total`` is a tensor (it may carry a graph); ``terms`` holds the
    detached sub-loss values and ``weights`` the factor each term enters the
    total with.
    """

    total: torch.Tensor
    terms: dict[str, float] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)

    def weighted_sum(self) -> float:
        return sum(self.weights.get(k, 1.0) * v for k, v in self.terms.items())

    def check(self, rtol: float = 1e-6, atol: float = 1e-7) -> None:
        total = float(self.total.detach())
        if not math.isfinite(total):
            raise FloatingPointError(f"non-finite loss; terms={self.terms} weights={self.weights}")
        expected = self.weighted_sum()
        if abs(total - expected) > atol + rtol * max(abs(total), abs(expected)):
            raise AssertionError(
                f"loss total {total} != weighted sum of terms {expected} ({self.terms}, {self.weights})"
            )

    def item(self) -> float:
        return float(self.total.detach())


def dice_loss_batch(
    pred: torch.Tensor,
    target: torch.Tensor,
    validity: torch.Tensor,
    eps: float = DEFAULT_SMOOTHING,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Masked soft DICE loss for a stack of masks.

    Args:
        pred: predictions, shape ``(..., H, W)``.
        target: soft targets, same shape.
        validity: boolean mask, same shape; only true pixels enter the sums.
        eps: smoothing added to numerator and denominator.

    Returns:
        ``(losses, contributes)``: the per-entry loss of shape ``(...)`` and a
        boolean tensor telling which entries have at least one valid pixel.
        Entries with no valid pixel carry a loss of 0 and must be excluded by
        the caller.
    """
    _check_same_shape(pred, target, validity)
    if eps <= 0:
        raise ContractError("smoothing must be positive")
    w = validity.to(pred.dtype)
    inter = (pred * target * w).sum(dim=(-2, -1))
    total = (pred * w).sum(dim=(-2, -1)) + (target * w).sum(dim=(-2, -1))
    losses = 1.0 - (2.0 * inter + eps) / (total + eps)
    contributes = validity.flatten(-2).any(dim=-1)
    return torch.where(contributes, losses, torch.zeros_like(losses)), contributes


def dice_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    validity: torch.Tensor | None = None,
    eps: float = DEFAULT_SMOOTHING,
) -> torch.Tensor | None:
    """Masked soft DICE loss of a single ``(H, W)`` mask pair.

    Returns ``None`` when no pixel is valid: such an entry contributes
    nothing and must not enter a batch mean.
    """
    if validity is None:
        validity = torch.ones_like(pred, dtype=torch.bool)
    losses, contributes = dice_loss_batch(pred, target, validity, eps)
    if not bool(contributes.all()):
        return None
    return losses


def _binarize(mask, threshold: float) -> np.ndarray:
    if isinstance(mask, torch.Tensor):
        mask = mask.detach().cpu().numpy()
    return np.asarray(mask) > threshold


def _overlap_counts(pred, target, threshold: float) -> tuple[int, int, int]:
    p = _binarize(pred, threshold)
    t = _binarize(target, threshold)
    if p.shape != t.shape:
        raise ContractError(f"shape mismatch: {p.shape} vs {t.shape}")
    inter = int(np.count_nonzero(p & t))
    return inter, int(np.count_nonzero(p)), int(np.count_nonzero(t))


def iou(pred, target, binarize_threshold: float = EVAL_THRESHOLD) -> float:
    """Intersection over union after thresholding; two empty masks score 1."""
    if not 0.0 < binarize_threshold < 1.0:
        raise ContractError("threshold must lie in (0, 1)")
    inter, n_pred, n_target = _overlap_counts(pred, target, binarize_threshold)
    union = n_pred + n_target - inter
    return 1.0 if union == 0 else inter / union


def dice_score(pred, target, binarize_threshold: float = EVAL_THRESHOLD) -> float:
    """Hard DICE overlap ``2|P∩T| / (|P|+|T|)``; two empty masks score 1."""
    if not 0.0 < binarize_threshold < 1.0:
        raise ContractError("threshold must lie in (0, 1)")
    inter, n_pred, n_target = _overlap_counts(pred, target, binarize_threshold)
    denom = n_pred + n_target
    return 1.0 if denom == 0 else 2.0 * inter / denom


def confidence_mask(pred: torch.Tensor, threshold: float = 0.999) -> torch.Tensor:
    """Pixels whose prediction is confidently polyp or confidently background."""
    if not 0.5 < threshold < 1.0:
        raise ContractError(f"confidence threshold must lie in (0.5, 1), got {threshold}")
    return (pred >= threshold) | (pred <= 1.0 - threshold)


def mixup_pair(a_img, a_mask, a_valid, b_img, b_mask, b_valid, lam: float):
    """Convex combination ``lam * a + (1 - lam) * b`` of two samples.

    The validity of the result is the pixel-wise AND of both validities.
    """
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"mixup weight must lie in [0, 1], got {lam}")
    _check_same_shape(a_img, b_img)
    _check_same_shape(a_mask, b_mask, a_valid, b_valid)
    if a_img.shape[-2:] != a_mask.shape[-2:]:
        raise ContractError("image and mask spatial dims differ")
    img = lam * a_img + (1.0 - lam) * b_img
    mask = lam * a_mask + (1.0 - lam) * b_mask
    return img, mask, a_valid & b_valid


def sample_mixup_lambda(alpha: float, rng: np.random.Generator) -> float:
    """Draw a mixup weight from a symmetric ``Beta(alpha, alpha)``."""
    if not alpha > 0:
        raise ContractError(f"alpha must be positive, got {alpha}")
    return float(rng.beta(alpha, alpha))
