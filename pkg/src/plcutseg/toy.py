"""Procedural colonoscopy-like toy data for desk-scale runs.

Synthetic frames are clean renders of a tube with elliptical polyps.  "Real"
frames come from the same generator with shifted color statistics, sensor
noise, blur and specular highlights, so a model trained only on the synthetic
frames sees a domain gap.  Both domains share per-frame illumination jitter;
the real palette keeps the polyp/wall contrast so the gap is bridgeable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageFilter

MAX_POLYP_FRACTION = 0.35


@dataclass(frozen=True)
class ToyCounts:
    synthetic: int = 200
    real: int = 100
    test: int = 40

    @classmethod
    def parse(cls, text: str) -> "ToyCounts":
        parts = [int(p) for p in text.split(",")]
        if len(parts) != 3:
            raise ValueError(f"expected three comma-separated counts, got {text!r}")
        return cls(*parts)


@dataclass(frozen=True)
class DomainStyle:
    wall: tuple[float, float, float]
    polyp: tuple[float, float, float]
    gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    noise: float = 0.0
    blur: float = 0.0
    highlights: int = 0
    jitter: float = 0.0  # per-frame illumination: brightness and per-channel gain spread


SYNTHETIC_STYLE = DomainStyle(wall=(0.85, 0.55, 0.50), polyp=(0.95, 0.70, 0.55), jitter=0.15)
REAL_STYLE = DomainStyle(wall=(0.78, 0.47, 0.40), polyp=(0.90, 0.62, 0.45), gain=(1.05, 0.9, 0.8),
                         noise=0.06, blur=0.8, highlights=3, jitter=0.15)


def _polyps(rng: np.random.Generator, size: int, yy, xx):
    """Rasterize 0-2 ellipses; returns (mask, shading) with total area capped."""
    mask = np.zeros((size, size), dtype=bool)
    shade = np.zeros((size, size), dtype=np.float32)
    n = int(rng.choice([0, 1, 1, 1, 2, 2]))
    budget = MAX_POLYP_FRACTION * size * size
    for _ in range(n):
        a = rng.uniform(0.08, 0.22) * size
        b = a * rng.uniform(0.6, 1.0)
        if np.pi * a * b + mask.sum() > budget:
            continue
        cy, cx = rng.uniform(0.2, 0.8, size=2) * size
        t = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(t) + dy * np.sin(t)) / a
        v = (-dx * np.sin(t) + dy * np.cos(t)) / b
        r2 = u * u + v * v
        inside = r2 <= 1.0
        if mask.sum() + inside.sum() > budget:
            continue
        mask |= inside
        # dome shading: brighter towards the top-left of the blob
        shade = np.where(inside, np.maximum(shade, 1.0 - 0.6 * r2 + 0.15 * (-u - v)), shade)
    return mask, shade


def render_frame(rng: np.random.Generator, size: int, style: DomainStyle):
    """Render one (image uint8 HxWx3, mask bool HxW) pair."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    cy, cx = rng.uniform(0.3, 0.7, size=2) * size
    r = np.hypot(yy - cy, xx - cx) / size
    # lumen: dark center fading to a lit wall, with haustral folds
    phase = rng.uniform(0, 2 * np.pi)
    freq = rng.uniform(14, 24)
    folds = 0.08 * np.sin(freq * r + phase)
    light = np.clip(0.25 + 1.6 * r, 0.0, 1.0) + folds
    texture = rng.normal(0, 1, size=(size // 8 + 1, size // 8 + 1))
    texture = np.kron(texture, np.ones((8, 8)))[:size, :size] * 0.03
    light = light + texture

    mask, shade = _polyps(rng, size, yy, xx)
    img = np.empty((size, size, 3), dtype=np.float32)
    gain = np.asarray(style.gain, dtype=np.float32)
    if style.jitter:
        gain = gain * rng.uniform(1 - style.jitter, 1 + style.jitter)
        gain = gain * rng.uniform(1 - style.jitter / 2, 1 + style.jitter / 2, size=3)
    for c in range(3):
        wall = style.wall[c] * light
        polyp = style.polyp[c] * (0.6 + 0.5 * shade) * np.clip(light + 0.2, 0.3, 1.2)
        img[..., c] = np.where(mask, polyp, wall) * gain[c]

    if style.highlights:
        for _ in range(int(rng.integers(0, style.highlights + 1))):
            hy, hx = rng.uniform(0, size, size=2)
            rad = rng.uniform(0.01, 0.03) * size
            spot = np.exp(-((yy - hy) ** 2 + (xx - hx) ** 2) / (2 * rad * rad))
            img += spot[..., None] * 0.9
    if style.noise:
        img += rng.normal(0, style.noise, size=img.shape).astype(np.float32)
    out = Image.fromarray((np.clip(img, 0, 1) * 255).round().astype(np.uint8), mode="RGB")
    if style.blur:
        out = out.filter(ImageFilter.GaussianBlur(style.blur))
    return np.asarray(out), mask


def _write_pair(img: np.ndarray, mask: np.ndarray, image_dir: Path, mask_dir: Path, name: str):
    Image.fromarray(img, mode="RGB").save(image_dir / name, optimize=False)
    Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(mask_dir / name, optimize=False)


def generate_toy_dataset(
    out: str | os.PathLike,
    counts: ToyCounts = ToyCounts(),
    size: int = 64,
    seed: int = 0,
) -> Path:
    """Write the toy tree under ``out``.

    Layout::

        synthetic/images, synthetic/masks    rendered frames with exact masks
        real/images                          real-style frames, no masks
        real_masks/                          their ground truth (for labeled splits / eval)
        test/images, test/masks              held-out real-style frames
    """
    if min(counts.synthetic, counts.real, counts.test) <= 0:
        raise ValueError("all counts must be positive")
    out = Path(out)
    try:
        dirs = {k: out / k for k in ("synthetic/images", "synthetic/masks", "real/images",
                                     "real_masks", "test/images", "test/masks")}
        for d in dirs.values():
            d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write toy dataset to {out}: {exc}") from exc

    streams = np.random.SeedSequence(seed).spawn(3)
    rng = np.random.default_rng(streams[0])
    for i in range(counts.synthetic):
        img, mask = render_frame(rng, size, SYNTHETIC_STYLE)
        _write_pair(img, mask, dirs["synthetic/images"], dirs["synthetic/masks"], f"syn_{i:05d}.png")
    rng = np.random.default_rng(streams[1])
    for i in range(counts.real):
        img, mask = render_frame(rng, size, REAL_STYLE)
        _write_pair(img, mask, dirs["real/images"], dirs["real_masks"], f"real_{i:05d}.png")
    rng = np.random.default_rng(streams[2])
    for i in range(counts.test):
        img, mask = render_frame(rng, size, REAL_STYLE)
        _write_pair(img, mask, dirs["test/images"], dirs["test/masks"], f"test_{i:05d}.png")
    return out
