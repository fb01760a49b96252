"""Unpaired synthetic-to-real translation: generator, patch discriminator,
patch projector and the adversarial + PatchNCE objective."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ContractError, LossValue


@dataclass
class TranslationConfig:
    ngf: int = 64
    ndf: int = 64
    n_blocks: int = 6
    n_downsampling: int = 2
    nce_layers: tuple[int, ...] = (0, 1, 2, 3, 4)
    num_patches: int = 256
    embed_dim: int = 256
    tau: float = 0.07

    def __post_init__(self):
        self.nce_layers = tuple(self.nce_layers)


class ResnetBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(dim, dim, 3), nn.InstanceNorm2d(dim), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(dim, dim, 3), nn.InstanceNorm2d(dim),
        )

    def forward(self, x):
        return x + self.block(x)


class ResnetGenerator(nn.Module):
    """Residual encoder-decoder ending in ``tanh``.

    The encoder is a list of stages; tap ``0`` is the input itself and tap
    ``i`` the output of stage ``i``.  ``encode`` returns the taps used for
    the patch-contrastive loss.
    """

    def __init__(self, ngf: int = 64, n_blocks: int = 6, n_downsampling: int = 2):
        super().__init__()
        self.downsampling = 2 ** n_downsampling
        stages = [nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(3, ngf, 7),
                                nn.InstanceNorm2d(ngf), nn.ReLU(True))]
        ch = ngf
        for _ in range(n_downsampling):
            stages.append(nn.Sequential(nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1),
                                        nn.InstanceNorm2d(ch * 2), nn.ReLU(True)))
            ch *= 2
        stages.extend(ResnetBlock(ch) for _ in range(n_blocks))
        self.encoder = nn.ModuleList(stages)
        self.channels = [3, ngf] + [ngf * 2 ** (i + 1) for i in range(n_downsampling)] + [ch] * n_blocks

        dec = []
        for _ in range(n_downsampling):
            dec += [nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1),
                    nn.InstanceNorm2d(ch // 2), nn.ReLU(True)]
            ch //= 2
        dec += [nn.ReflectionPad2d(3), nn.Conv2d(ch, 3, 7), nn.Tanh()]
        self.decoder = nn.Sequential(*dec)

    def forward(self, x):
        for stage in self.encoder:
            x = stage(x)
        return self.decoder(x)

    def encode(self, x, layers: Sequence[int]) -> list[torch.Tensor]:
        wanted = set(layers)
        if max(wanted) > len(self.encoder):
            raise ContractError(f"encoder has taps 0..{len(self.encoder)}, asked for {max(wanted)}")
        feats = {0: x} if 0 in wanted else {}
        for i, stage in enumerate(self.encoder, start=1):
            if i > max(wanted):
                break
            x = stage(x)
            if i in wanted:
                feats[i] = x
        return [feats[i] for i in layers]


class PatchDiscriminator(nn.Module):
    """PatchGAN classifier producing a grid of realness scores."""

    def __init__(self, ndf: int = 64, n_layers: int = 3):
        super().__init__()
        layers = [nn.Conv2d(3, ndf, 4, stride=2, padding=1), nn.LeakyReLU(0.2, True)]
        mult = 1
        for n in range(1, n_layers + 1):
            prev, mult = mult, min(2 ** n, 8)
            stride = 2 if n < n_layers else 1
            layers += [nn.Conv2d(ndf * prev, ndf * mult, 4, stride=stride, padding=1),
                       nn.InstanceNorm2d(ndf * mult), nn.LeakyReLU(0.2, True)]
        layers.append(nn.Conv2d(ndf * mult, 1, 4, stride=1, padding=1))
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


class PatchProjector(nn.Module):
    """Per-layer two-layer MLPs mapping patch features to the unit sphere."""

    def __init__(self, in_channels: Sequence[int], embed_dim: int = 256):
        super().__init__()
        self.embed_dim = embed_dim
        self.mlps = nn.ModuleList(
            nn.Sequential(nn.Linear(c, embed_dim), nn.ReLU(True), nn.Linear(embed_dim, embed_dim))
            for c in in_channels)

    def forward(self, patches: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        return [F.normalize(mlp(p), dim=-1) for mlp, p in zip(self.mlps, patches)]


def build_translation_nets(cfg: TranslationConfig):
    G = ResnetGenerator(cfg.ngf, cfg.n_blocks, cfg.n_downsampling)
    D = PatchDiscriminator(cfg.ndf)
    H = PatchProjector([G.channels[i] for i in cfg.nce_layers], cfg.embed_dim)
    return G, D, H


def check_normalized(x: torch.Tensor, tol: float = 1e-5) -> None:
    lo, hi = float(x.min()), float(x.max())
    if lo < -1 - tol or hi > 1 + tol:
        raise ContractError(f"expected a normalized image in [-1, 1], got range [{lo:.3f}, {hi:.3f}]")


def translate(G: ResnetGenerator, x_s: torch.Tensor) -> torch.Tensor:
    """Map normalized synthetic images towards the real domain."""
    check_normalized(x_s)
    h, w = x_s.shape[-2:]
    if h % G.downsampling or w % G.downsampling:
        raise ContractError(f"image dims {h}x{w} must be divisible by {G.downsampling}")
    return G(x_s)


def gan_losses(D: nn.Module, real: torch.Tensor, generated: torch.Tensor) -> tuple[LossValue, LossValue]:
    """Least-squares adversarial losses ``(discriminator, generator)``.

    The discriminator loss sees ``generated`` detached; the generator loss
    keeps the graph so gradients reach the generator.
    """
    if real.numel() == 0 or generated.numel() == 0:
        raise ContractError("GAN losses need non-empty batches")
    pred_real = D(real)
    pred_fake = D(generated.detach())
    d_real = ((pred_real - 1) ** 2).mean()
    d_fake = (pred_fake ** 2).mean()
    d_total = 0.5 * (d_real + d_fake)
    d_loss = LossValue(d_total, {"d_real": d_real.item(), "d_fake": d_fake.item()},
                       {"d_real": 0.5, "d_fake": 0.5})
    g_total = ((D(generated) - 1) ** 2).mean()
    return d_loss, LossValue(g_total, {"gan": g_total.item()}, {"gan": 1.0})


def patchnce_from_features(query: torch.Tensor, key: torch.Tensor, tau: float) -> torch.Tensor:
    """InfoNCE over patch locations.

    ``query`` and ``key`` are ``(B, N, d)`` unit vectors.  For each location,
    the key at the same location is the positive and the other ``N - 1``
    keys of the same image are negatives.  Returns the per-location loss
    ``(B, N)``.
    """
    logits = torch.bmm(query, key.transpose(1, 2)) / tau
    b, n, _ = logits.shape
    labels = torch.arange(n, device=logits.device).expand(b, n)
    return F.cross_entropy(logits.reshape(b * n, n), labels.reshape(-1), reduction="none").view(b, n)


def sample_patches(feats: Sequence[torch.Tensor], num_patches: int, layers: Sequence[int],
                   generator: torch.Generator | None = None) -> list[torch.Tensor]:
    """Pick ``num_patches`` spatial locations per layer (same ones for every image)."""
    ids = []
    for layer, f in zip(layers, feats):
        hw = f.shape[-2] * f.shape[-1]
        if num_patches > hw:
            raise ContractError(f"layer {layer} has only {hw} locations, asked for {num_patches} patches")
        ids.append(torch.randperm(hw, generator=generator)[:num_patches])
    return ids


def gather_patches(feats: Sequence[torch.Tensor], ids: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    out = []
    for f, idx in zip(feats, ids):
        flat = f.flatten(2).transpose(1, 2)  # (B, HW, C)
        out.append(flat[:, idx.to(f.device), :])
    return out


def patchnce_loss(
    G: ResnetGenerator,
    H: PatchProjector,
    x: torch.Tensor,
    z: torch.Tensor,
    layers: Sequence[int],
    num_patches: int = 256,
    tau: float = 0.07,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Patch-contrastive loss tying features of ``z = G(x)`` to those of ``x``.

    Keys (features of ``x``) are treated as constants, as in CUT.
    """
    if x.shape != z.shape:
        raise ContractError(f"input {tuple(x.shape)} and output {tuple(z.shape)} differ")
    feat_q = G.encode(z, layers)
    feat_k = G.encode(x, layers)
    ids = sample_patches(feat_k, num_patches, layers, generator)
    q = H(gather_patches(feat_q, ids))
    k = H(gather_patches(feat_k, ids))
    per_layer = [patchnce_from_features(qi, ki.detach(), tau).mean() for qi, ki in zip(q, k)]
    return torch.stack(per_layer).mean()


def translation_objective(
    G, D, H, x_s, x_r,
    lambda_xs: float = 1.0,
    lambda_xr: float = 1.0,
    cfg: TranslationConfig | None = None,
    z_s: torch.Tensor | None = None,
    z_r: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> LossValue:
    """Generator-side objective: GAN + weighted PatchNCE on synthetic and real.

    The real term contrasts ``G(x_r)`` against ``x_r`` (identity-style pair).
    """
    if lambda_xs < 0 or lambda_xr < 0:
        raise ContractError("PatchNCE weights must be non-negative")
    cfg = cfg or TranslationConfig()
    if z_s is None:
        z_s = translate(G, x_s)
    _, g_loss = gan_losses(D, x_r, z_s)
    total = g_loss.total
    terms = {"gan": g_loss.total.item()}
    weights = {"gan": 1.0, "nce_syn": lambda_xs, "nce_real": lambda_xr}
    if lambda_xs > 0:
        nce_syn = patchnce_loss(G, H, x_s, z_s, cfg.nce_layers, cfg.num_patches, cfg.tau, generator)
        total = total + lambda_xs * nce_syn
        terms["nce_syn"] = nce_syn.item()
    else:
        terms["nce_syn"] = 0.0
    if lambda_xr > 0:
        if z_r is None:
            z_r = translate(G, x_r)
        nce_real = patchnce_loss(G, H, x_r, z_r, cfg.nce_layers, cfg.num_patches, cfg.tau, generator)
        total = total + lambda_xr * nce_real
        terms["nce_real"] = nce_real.item()
    else:
        terms["nce_real"] = 0.0
    return LossValue(total, terms, weights)


def uniform_nce_baseline(num_patches: int) -> float:
    """Loss of a uniform softmax over the candidates, ``ln(N)``."""
    return math.log(num_patches)
