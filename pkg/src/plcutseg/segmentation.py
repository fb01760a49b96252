"""Segmentation network behind a small backbone registry, and the masked
DICE objective over mixed real / synthetic / interpolated batches."""

from __future__ import annotations

import hashlib
from typing import Callable, Iterable, Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import DEFAULT_SMOOTHING, ContractError, LossValue, dice_loss_batch
from .data import SampleLoader, SampleRef, TrainingBatch, eval_preprocess


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Encoder-decoder with skip connections; one logit per pixel."""

    def __init__(self, base_channels: int = 16, depth: int = 4):
        super().__init__()
        chans = [base_channels * 2 ** i for i in range(depth)]
        self.stride = 2 ** (depth - 1)
        self.down = nn.ModuleList()
        cin = 3
        for c in chans:
            self.down.append(_conv_block(cin, c))
            cin = c
        self.up = nn.ModuleList(_conv_block(chans[i] + chans[i - 1], chans[i - 1])
                                for i in range(depth - 1, 0, -1))
        self.head = nn.Conv2d(chans[0], 1, 1)

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.down):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        skips.pop()
        for block in self.up:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = block(torch.cat([x, skips.pop()], dim=1))
        return self.head(x)


class ChannelAffine(nn.Module):
    """Two-parameter backbone: ``logit = weight * x[:, 0] + bias``.

    Used for gradient checks and as a scriptable stub predictor.
    """

    stride = 1

    def __init__(self, weight: float = 1.0, bias: float = 0.0):
        super().__init__()
        self.weight = nn.Parameter(torch.tensor(float(weight)))
        self.bias = nn.Parameter(torch.tensor(float(bias)))

    def forward(self, x):
        return (self.weight * x[:, :1] + self.bias)


class ConstantNet(nn.Module):
    """Ignores its input; every pixel gets the same logit."""

    stride = 1

    def __init__(self, logit: float = 0.0):
        super().__init__()
        self.logit = nn.Parameter(torch.tensor(float(logit)))

    def forward(self, x):
        return self.logit.expand(x.shape[0], 1, *x.shape[-2:])


BACKBONES: dict[str, Callable[..., nn.Module]] = {
    "unet": UNet,
    "channel-affine": ChannelAffine,
    "constant": ConstantNet,
}


class SegmentationNet(nn.Module):
    """Wraps a registered backbone and remembers how to rebuild it."""

    def __init__(self, backbone: str = "unet", **kwargs):
        super().__init__()
        if backbone not in BACKBONES:
            raise ContractError(f"unknown backbone {backbone!r}; known: {sorted(BACKBONES)}")
        self.backbone_name = backbone
        self.backbone_kwargs = dict(kwargs)
        self.backbone = BACKBONES[backbone](**kwargs)
        self.stride = getattr(self.backbone, "stride", 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ContractError(f"input {h}x{w} must be divisible by {self.stride} for {self.backbone_name}")
        return self.backbone(x)


def predict(U: nn.Module, images: torch.Tensor, train: bool = False) -> torch.Tensor:
    """Soft masks for normalized images.

    Accepts ``(3, H, W)`` or ``(N, 3, H, W)`` and returns ``(H, W)`` or
    ``(N, H, W)``.  With ``train=False`` the call runs without autograd and
    leaves the module's mode as it found it.
    """
    single = images.dim() == 3
    x = images.unsqueeze(0) if single else images
    if train:
        probs = torch.sigmoid(U(x))[:, 0]
    else:
        was_training = U.training
        U.eval()
        try:
            with torch.no_grad():
                probs = torch.sigmoid(U(x))[:, 0]
        finally:
            U.train(was_training)
    return probs[0] if single else probs


def segmentation_objective(U: nn.Module, batch: TrainingBatch, eps: float = DEFAULT_SMOOTHING,
                           probs: torch.Tensor | None = None) -> LossValue:
    """Mean masked DICE loss over the batch entries with at least one valid pixel.

    The term breakdown holds one sub-mean per entry tag, weighted by that
    tag's share of the contributing entries.
    """
    if probs is None:
        probs = torch.sigmoid(U(batch.images))[:, 0]
    losses, contributes = dice_loss_batch(probs, batch.targets.to(probs.dtype), batch.validity, eps)
    n = int(contributes.sum())
    if n == 0:
        raise ContractError("degenerate batch: no entry has a valid pixel")
    total = losses.sum() / n
    terms, weights = {}, {}
    for tag in dict.fromkeys(batch.tags):
        sel = torch.tensor([t is tag for t in batch.tags]) & contributes.cpu()
        k = int(sel.sum())
        if k:
            terms[tag.value] = losses[sel.to(losses.device)].sum().item() / k
            weights[tag.value] = k / n
    return LossValue(total, terms, weights)


def predict_for_pseudo_labels(
    U: nn.Module,
    refs: Iterable[SampleRef],
    loader: SampleLoader,
    size: int,
    batch_size: int = 16,
) -> dict[str, torch.Tensor]:
    """Clean (non-augmented) soft predictions for unlabeled samples.

    Frames are resized to ``size`` for the network and the prediction is
    brought back to the loader's frame resolution, so it lines up with the
    frames the batch composer augments.
    """
    refs = list(refs)
    out: dict[str, torch.Tensor] = {}
    for start in range(0, len(refs), batch_size):
        chunk = refs[start:start + batch_size]
        frames = [loader.image(r) for r in chunk]
        x = torch.stack([eval_preprocess(f, size) for f in frames])
        probs = predict(U, x.to(next(U.parameters()).device))
        for ref, frame, p in zip(chunk, frames, probs):
            if p.shape != frame.shape[-2:]:
                p = F.interpolate(p[None, None], size=frame.shape[-2:], mode="bilinear",
                                  align_corners=False)[0, 0].clamp(0.0, 1.0)
            out[ref.id] = p.cpu()
    return out


def parameter_fingerprint(*modules: nn.Module) -> str:
    """Hash of all parameters and buffers (bit-exact)."""
    h = hashlib.sha256()
    for m in modules:
        for name, t in m.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def load_pretrained(U: SegmentationNet, state: Mapping[str, torch.Tensor], strict: bool = False):
    """Load (possibly partial) backbone weights, e.g. an ImageNet-initialized encoder."""
    return U.backbone.load_state_dict(dict(state), strict=strict)
