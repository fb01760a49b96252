"""Datasets, split manifests, augmentation, batch composition and pseudo-labels."""

from __future__ import annotations

import json
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .core import ContractError, confidence_mask, mixup_pair, normalize, sample_mixup_lambda

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
MANIFEST_FORMAT = "plcutseg-manifest/1"


class DataError(RuntimeError):
    """Raised for malformed datasets, manifests or batch requests."""


class Provenance(str, Enum):
    LABELED_REAL = "labeled-real"
    UNLABELED_REAL = "unlabeled-real"
    SYNTHETIC = "synthetic"


class Tag(str, Enum):
    REAL_LABELED = "real-labeled"
    REAL_PSEUDO = "real-pseudo"
    SYNTHETIC = "synthetic"
    INTERPOLATED = "interpolated"


SELF_SUP = "self-sup"
SEMI_SUP = "semi-sup"
MODES = (SELF_SUP, SEMI_SUP)


@dataclass(frozen=True)
class SampleRef:
    id: str
    image_path: Path
    mask_path: Path | None
    provenance: Provenance

    def __post_init__(self):
        object.__setattr__(self, "provenance", Provenance(self.provenance))
        needs_mask = self.provenance is not Provenance.UNLABELED_REAL
        if needs_mask and self.mask_path is None:
            raise ContractError(f"{self.provenance.value} sample {self.id!r} needs a mask path")
        if not needs_mask and self.mask_path is not None:
            raise ContractError(f"unlabeled sample {self.id!r} must not carry a mask path")


def _list_images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def ingest_dataset(
    root: str | os.PathLike,
    provenance: Provenance | str,
    mask_dir: str | os.PathLike | None = None,
    prefix: str | None = None,
) -> list[SampleRef]:
    """Build one SampleRef per image under ``<root>/images``.

    Masks are looked up by file stem in ``<root>/masks`` (or ``mask_dir``).
    Sample ids are ``<prefix>/<stem>`` where the prefix defaults to the
    directory name.
    """
    root = Path(root)
    provenance = Provenance(provenance)
    image_dir = root / "images"
    if not image_dir.is_dir():
        raise DataError(f"{root}: missing images/ directory")
    images = _list_images(image_dir)
    if not images:
        raise DataError(f"{image_dir}: no images found")
    prefix = prefix if prefix is not None else root.name

    if provenance is Provenance.UNLABELED_REAL:
        return [SampleRef(f"{prefix}/{p.stem}", p, None, provenance) for p in images]

    masks_root = Path(mask_dir) if mask_dir is not None else root / "masks"
    if not masks_root.is_dir():
        raise DataError(f"{root}: missing masks directory {masks_root}")
    masks = {p.stem: p for p in _list_images(masks_root)}
    missing = [p.name for p in images if p.stem not in masks]
    if missing:
        raise DataError(f"{root}: images without a matching mask: {', '.join(missing)}")
    return [SampleRef(f"{prefix}/{p.stem}", p, masks[p.stem], provenance) for p in images]


# --------------------------------------------------------------------------
# Image / mask IO


def load_image(path: str | os.PathLike, size: int | None = None) -> torch.Tensor:
    """Read an RGB image as a raw ``(3, H, W)`` float tensor in [0, 1]."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).contiguous()


def load_mask(path: str | os.PathLike, size: int | None = None) -> torch.Tensor:
    """Read an 8-bit grayscale mask and binarize it at 127.5 into {0, 1}."""
    with Image.open(path) as im:
        im = im.convert("L")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.NEAREST)
        arr = np.asarray(im, dtype=np.float32)
    return torch.from_numpy((arr > 127.5).astype(np.float32))


def save_mask(mask, path: str | os.PathLike) -> None:
    if isinstance(mask, torch.Tensor):
        mask = mask.detach().cpu().numpy()
    arr = (np.asarray(mask) > 0.5).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path)


class SampleLoader:
    """Loads frames at the training resolution and counts every mask read.

    ``mask_reads`` maps sample id to the number of ground-truth mask reads;
    it backs the check that no unlabeled sample's ground truth is ever used.
    """

    def __init__(self, frame_size: int | None = None, cache: bool = True):
        self.frame_size = frame_size
        self.cache = cache
        self._images: dict[Path, torch.Tensor] = {}
        self._masks: dict[Path, torch.Tensor] = {}
        self.mask_reads: Counter[str] = Counter()
        self.mask_path_reads: Counter[str] = Counter()

    def image(self, ref: SampleRef) -> torch.Tensor:
        path = Path(ref.image_path)
        if path in self._images:
            return self._images[path]
        img = load_image(path, self.frame_size)
        if self.cache:
            self._images[path] = img
        return img

    def mask(self, ref: SampleRef) -> torch.Tensor:
        if ref.mask_path is None:
            raise DataError(f"sample {ref.id!r} has no ground-truth mask")
        path = Path(ref.mask_path)
        self.mask_reads[ref.id] += 1
        self.mask_path_reads[str(path.resolve())] += 1
        if path in self._masks:
            return self._masks[path]
        mask = load_mask(path, self.frame_size)
        if self.cache:
            self._masks[path] = mask
        return mask


# --------------------------------------------------------------------------
# Split manifests


@dataclass
class SplitManifest:
    dataset: str
    beta: float
    seed: int
    labeled: list[SampleRef] = field(default_factory=list)
    unlabeled: list[SampleRef] = field(default_factory=list)
    synthetic: list[SampleRef] = field(default_factory=list)

    def __post_init__(self):
        ids = [r.id for r in self.all_refs()]
        dupes = [i for i, n in Counter(ids).items() if n > 1]
        if dupes:
            raise DataError(f"duplicate sample ids in manifest: {dupes[:5]}")

    def all_refs(self) -> list[SampleRef]:
        return [*self.labeled, *self.unlabeled, *self.synthetic]

    @property
    def counts(self) -> dict[str, int]:
        return {"labeled": len(self.labeled), "unlabeled": len(self.unlabeled),
                "synthetic": len(self.synthetic)}

    def to_text(self, base_dir: str | os.PathLike | None = None) -> str:
        base = Path(base_dir).resolve() if base_dir is not None else None

        def rel(p):
            if p is None:
                return None
            p = Path(p)
            if base is None:
                return str(p)
            return os.path.relpath(p.resolve(), base)

        header = {"format": MANIFEST_FORMAT, "dataset": self.dataset, "beta": self.beta,
                  "seed": self.seed, **self.counts}
        lines = [json.dumps(header, sort_keys=True)]
        for split, refs in (("labeled", self.labeled), ("unlabeled", self.unlabeled),
                            ("synthetic", self.synthetic)):
            for r in refs:
                lines.append(json.dumps({"id": r.id, "image": rel(r.image_path),
                                         "mask": rel(r.mask_path), "provenance": r.provenance.value,
                                         "split": split}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def write(self, path: str | os.PathLike) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(path.parent))

    @classmethod
    def read(cls, path: str | os.PathLike) -> "SplitManifest":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"manifest not found: {path}")
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        if not lines:
            raise DataError(f"{path}: empty manifest")
        header = json.loads(lines[0])
        if header.get("format") != MANIFEST_FORMAT:
            raise DataError(f"{path}: unsupported manifest format {header.get('format')!r}")
        splits: dict[str, list[SampleRef]] = {"labeled": [], "unlabeled": [], "synthetic": []}
        for n, line in enumerate(lines[1:], start=2):
            rec = json.loads(line)
            if rec["split"] not in splits:
                raise DataError(f"{path}:{n}: unknown split {rec['split']!r}")
            mask = rec.get("mask")
            splits[rec["split"]].append(SampleRef(
                rec["id"], (path.parent / rec["image"]).resolve(),
                (path.parent / mask).resolve() if mask else None, Provenance(rec["provenance"])))
        return cls(header["dataset"], header["beta"], header["seed"], **splits)


def labeled_count(n_real: int, beta: float) -> int:
    """Number of labeled samples for a percentage ``beta`` (half rounds up)."""
    return int(math.floor(beta / 100.0 * n_real + 0.5))


def make_split(
    real_refs: Sequence[SampleRef],
    synthetic_refs: Sequence[SampleRef],
    beta: float,
    seed: int,
    dataset: str = "dataset",
) -> SplitManifest:
    """Uniformly partition the real samples into labeled (beta %) and unlabeled.

    Unlabeled refs are stripped of their mask path, so nothing downstream can
    reach their ground truth.
    """
    if not 0 <= beta <= 100:
        raise ContractError(f"beta must lie in [0, 100], got {beta}")
    n_labeled = labeled_count(len(real_refs), beta)
    if beta > 0 and n_labeled == 0:
        logger.warning("beta=%s%% of %d real samples rounds to 0 labeled samples; "
                       "proceeding self-supervised", beta, len(real_refs))
    order = np.random.default_rng(seed).permutation(len(real_refs))
    chosen = set(order[:n_labeled].tolist())
    labeled, unlabeled = [], []
    for i, ref in enumerate(real_refs):
        if i in chosen:
            if ref.mask_path is None:
                raise DataError(f"sample {ref.id!r} drawn as labeled but has no mask")
            labeled.append(SampleRef(ref.id, ref.image_path, ref.mask_path, Provenance.LABELED_REAL))
        else:
            unlabeled.append(SampleRef(ref.id, ref.image_path, None, Provenance.UNLABELED_REAL))
    synthetic = [SampleRef(r.id, r.image_path, r.mask_path, Provenance.SYNTHETIC) for r in synthetic_refs]
    return SplitManifest(dataset, float(beta), int(seed), labeled, unlabeled, synthetic)


# --------------------------------------------------------------------------
# Augmentation


@dataclass
class AugmentationConfig:
    source_size: int = 320
    crop_size: int = 256
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    rotation: tuple[float, float] = (-360.0, 360.0)
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)
    normalize: bool = True

    def __post_init__(self):
        self.rotation = tuple(self.rotation)
        self.mean = tuple(self.mean)
        self.std = tuple(self.std)
        if self.crop_size > self.source_size:
            raise ContractError("crop size exceeds source size")
        for p in (self.hflip_prob, self.vflip_prob):
            if not 0.0 <= p <= 1.0:
                raise ContractError("flip probabilities must lie in [0, 1]")


@dataclass(frozen=True)
class AugmentParams:
    angle: float = 0.0
    hflip: bool = False
    vflip: bool = False
    top: int | None = None  # None means centered
    left: int | None = None


def sample_augment_params(config: AugmentationConfig, size: int, rng: np.random.Generator) -> AugmentParams:
    lo, hi = config.rotation
    angle = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    hflip = bool(rng.random() < config.hflip_prob)
    vflip = bool(rng.random() < config.vflip_prob)
    slack = size - config.crop_size
    top = int(rng.integers(0, slack + 1))
    left = int(rng.integers(0, slack + 1))
    return AugmentParams(angle, hflip, vflip, top, left)


def _rotate(stack: torch.Tensor, angle: float) -> torch.Tensor:
    # Bilinear with zero padding: outputs are convex combinations of inputs and 0.
    rad = math.radians(angle)
    c, s = math.cos(rad), math.sin(rad)
    theta = stack.new_tensor([[c, -s, 0.0], [s, c, 0.0]]).unsqueeze(0)
    grid = F.affine_grid(theta, [1, *stack.shape], align_corners=False)
    out = F.grid_sample(stack.unsqueeze(0), grid, mode="bilinear", padding_mode="zeros",
                        align_corners=False)[0]
    return out.clamp_(0.0, 1.0)


def augment(
    image: torch.Tensor,
    mask: torch.Tensor,
    config: AugmentationConfig,
    rng: np.random.Generator | None = None,
    params: AugmentParams | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Apply one random geometric transform to an image and its mask.

    ``image`` is raw ``(3, H, W)`` in [0, 1]; ``mask`` is ``(H, W)``.  The
    same rotation, flips and crop hit both; normalization only the image.
    Pass ``params`` to fix the transform (``AugmentParams()`` is the identity
    with a centered crop).
    """
    h, w = image.shape[-2:]
    if mask.shape != (h, w):
        raise ContractError(f"image {tuple(image.shape)} and mask {tuple(mask.shape)} differ")
    if min(h, w) < config.crop_size:
        raise ContractError(f"frame {h}x{w} smaller than crop {config.crop_size}")
    if params is None:
        if rng is None:
            raise ContractError("augment needs an rng or explicit params")
        params = sample_augment_params(config, min(h, w), rng)

    stack = torch.cat([image, mask.unsqueeze(0).to(image.dtype)], dim=0)
    if params.angle % 360.0 != 0.0:
        stack = _rotate(stack, params.angle)
    if params.hflip:
        stack = stack.flip(-1)
    if params.vflip:
        stack = stack.flip(-2)
    cs = config.crop_size
    top = (h - cs) // 2 if params.top is None else params.top
    left = (w - cs) // 2 if params.left is None else params.left
    stack = stack[:, top:top + cs, left:left + cs]

    img, out_mask = stack[:3].contiguous(), stack[3].contiguous()
    if config.normalize:
        mean = img.new_tensor(config.mean).view(-1, 1, 1)
        std = img.new_tensor(config.std).view(-1, 1, 1)
        img = (img - mean) / std
    return img, out_mask


def eval_preprocess(image: torch.Tensor, size: int) -> torch.Tensor:
    """Deterministic preprocessing for inference: resize to ``size`` and normalize."""
    if image.shape[-2:] != (size, size):
        image = F.interpolate(image.unsqueeze(0), size=(size, size), mode="bilinear",
                              align_corners=False)[0].clamp(0.0, 1.0)
    return normalize(image)


# --------------------------------------------------------------------------
# Pseudo-labels


@dataclass(frozen=True)
class PseudoLabelStore:
    """Epoch-versioned soft pseudo-labels for the unlabeled samples."""

    masks: Mapping[str, torch.Tensor]
    version: int = 0

    def __post_init__(self):
        object.__setattr__(self, "masks", MappingProxyType(dict(self.masks)))

    @classmethod
    def initial(cls, ids: Iterable[str], shape: tuple[int, int]) -> "PseudoLabelStore":
        """Version 0: every unlabeled sample starts as an all-background mask."""
        return cls({i: torch.zeros(shape) for i in ids}, 0)

    def __getitem__(self, sample_id: str) -> torch.Tensor:
        return self.masks[sample_id]

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self.masks

    def __len__(self) -> int:
        return len(self.masks)

    def ids(self) -> list[str]:
        return list(self.masks)


def refresh_pseudo_labels(store: PseudoLabelStore, predictions: Mapping[str, torch.Tensor]) -> PseudoLabelStore:
    """Return a new store one version later with ``predictions`` swapped in."""
    foreign = [k for k in predictions if k not in store.masks]
    if foreign:
        raise DataError(f"pseudo-label predictions for ids outside the unlabeled set: {foreign[:5]}")
    updated = dict(store.masks)
    for k, pred in predictions.items():
        pred = pred.detach().to(torch.float32).cpu()
        if pred.shape != store.masks[k].shape:
            raise ContractError(f"pseudo-label for {k!r} has shape {tuple(pred.shape)}, "
                                f"expected {tuple(store.masks[k].shape)}")
        updated[k] = pred.clone()
    return PseudoLabelStore(updated, store.version + 1)


# --------------------------------------------------------------------------
# Batches


@dataclass
class TrainingBatch:
    images: torch.Tensor  # (N, 3, h, w), normalized
    targets: torch.Tensor  # (N, h, w)
    validity: torch.Tensor  # (N, h, w) bool
    tags: list[Tag]
    ids: list[str]
    translation_real: torch.Tensor | None = None  # real images for the translation stage
    mixup_log: list[tuple[int, int, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tags)

    def indices(self, tag: Tag) -> list[int]:
        return [i for i, t in enumerate(self.tags) if t is tag]

    def with_images(self, index: Sequence[int], images: torch.Tensor) -> "TrainingBatch":
        """Copy of the batch with the images at ``index`` replaced (graph-preserving)."""
        rows = list(self.images.unbind(0))
        for i, img in zip(index, images.unbind(0)):
            rows[i] = img
        return TrainingBatch(torch.stack(rows), self.targets, self.validity, list(self.tags),
                             list(self.ids), self.translation_real, list(self.mixup_log))


class _CyclingPool:
    """Draws refs without replacement, reshuffling when exhausted."""

    def __init__(self, refs: Sequence[SampleRef], rng: np.random.Generator):
        self.refs = list(refs)
        self.rng = rng
        self.order: list[int] = []

    def take(self, k: int) -> list[SampleRef]:
        out: list[int] = []
        while len(out) < k:
            if not self.order:
                order = self.rng.permutation(len(self.refs)).tolist()
                # keep a batch free of repeats whenever the pool is large enough
                if len(self.refs) >= k:
                    order = [i for i in order if i not in out] + [i for i in order if i in out]
                self.order = order
            out.append(self.order.pop(0))
        return [self.refs[i] for i in out]


def real_half_split(mode: str, real_count: int) -> tuple[int, int]:
    """Number of (labeled, pseudo-labeled) real entries for a real half of ``real_count``."""
    if mode == SELF_SUP:
        return 0, real_count
    if mode == SEMI_SUP:
        n_lab = (real_count + 1) // 2
        return n_lab, real_count - n_lab
    raise ContractError(f"unknown mode {mode!r}; expected one of {MODES}")


class BatchComposer:
    """Builds half-real / half-synthetic training batches from a manifest.

    Args:
        manifest: the split to draw from.
        loader: frame loader (its mask-read counter is the leak check).
        mode: ``"self-sup"`` or ``"semi-sup"``.
        batch_size: M, the number of entries before mixup.
        augmentation: geometric/normalization settings.
        rng: numpy generator driving sampling and augmentation.
        use_pseudo_labels: when false, real-pseudo entries are dropped.
        confidence_threshold: validity threshold for pseudo-labels, or
            ``None`` to keep every pixel.
    """

    def __init__(
        self,
        manifest: SplitManifest,
        loader: SampleLoader,
        mode: str,
        batch_size: int,
        augmentation: AugmentationConfig,
        rng: np.random.Generator,
        use_pseudo_labels: bool = True,
        confidence_threshold: float | None = 0.999,
    ):
        if batch_size < 2 or batch_size % 2:
            raise ContractError(f"batch size must be even and >= 2, got {batch_size}")
        if mode not in MODES:
            raise ContractError(f"unknown mode {mode!r}; expected one of {MODES}")
        if mode == SEMI_SUP and not manifest.labeled:
            raise DataError("semi-supervised mode requires a non-empty labeled set")
        if not manifest.synthetic:
            raise DataError("manifest has no synthetic samples")
        if not manifest.unlabeled and (use_pseudo_labels or mode == SELF_SUP):
            if mode == SELF_SUP or real_half_split(mode, batch_size // 2)[1] > 0:
                raise DataError("manifest has no unlabeled samples for pseudo-labeled entries")
        self.manifest = manifest
        self.loader = loader
        self.mode = mode
        self.batch_size = batch_size
        self.augmentation = augmentation
        self.rng = rng
        self.use_pseudo_labels = use_pseudo_labels
        self.confidence_threshold = confidence_threshold
        self._synthetic = _CyclingPool(manifest.synthetic, rng)
        self._labeled = _CyclingPool(manifest.labeled, rng) if manifest.labeled else None
        self._unlabeled = _CyclingPool(manifest.unlabeled, rng) if manifest.unlabeled else None
        real = manifest.labeled + manifest.unlabeled
        self._translation_real = _CyclingPool(real, rng) if real else None

    def batches_per_epoch(self) -> int:
        return math.ceil(len(self.manifest.synthetic) / (self.batch_size // 2))

    def _entry(self, ref: SampleRef, target_src: torch.Tensor, tag: Tag):
        img, target = augment(self.loader.image(ref), target_src, self.augmentation, self.rng)
        if tag is Tag.REAL_PSEUDO and self.confidence_threshold is not None:
            valid = confidence_mask(target, self.confidence_threshold)
        else:
            valid = torch.ones_like(target, dtype=torch.bool)
        return img, target, valid

    def next_batch(self, store: PseudoLabelStore) -> TrainingBatch:
        half = self.batch_size // 2
        n_lab, n_pseudo = real_half_split(self.mode, half)
        entries: list[tuple[SampleRef, torch.Tensor, Tag]] = []

        if n_lab:
            for ref in self._labeled.take(n_lab):
                entries.append((ref, self.loader.mask(ref), Tag.REAL_LABELED))
        pseudo_refs = self._unlabeled.take(n_pseudo) if n_pseudo and self._unlabeled else []
        if self.use_pseudo_labels:
            for ref in pseudo_refs:
                if ref.id not in store:
                    raise DataError(f"no pseudo-label stored for {ref.id!r}")
                entries.append((ref, store[ref.id], Tag.REAL_PSEUDO))
        for ref in self._synthetic.take(half):
            entries.append((ref, self.loader.mask(ref), Tag.SYNTHETIC))

        imgs, targets, valids = zip(*(self._entry(r, t, tag) for r, t, tag in entries))
        real_imgs = [imgs[i] for i, (_, _, tag) in enumerate(entries) if tag is not Tag.SYNTHETIC]
        # Pseudo entries dropped: the translation stage still needs real inputs.
        if not self.use_pseudo_labels and pseudo_refs:
            for ref in pseudo_refs:
                frame = self.loader.image(ref)
                img, _ = augment(frame, torch.zeros(frame.shape[-2:]), self.augmentation, self.rng)
                real_imgs.append(img)
        if not real_imgs and self._translation_real is not None:
            for ref in self._translation_real.take(half):
                frame = self.loader.image(ref)
                img, _ = augment(frame, torch.zeros(frame.shape[-2:]), self.augmentation, self.rng)
                real_imgs.append(img)
        return TrainingBatch(
            images=torch.stack(imgs),
            targets=torch.stack(targets),
            validity=torch.stack(valids),
            tags=[tag for _, _, tag in entries],
            ids=[r.id for r, _, _ in entries],
            translation_real=torch.stack(real_imgs) if real_imgs else None,
        )


def compose_batch(
    manifest: SplitManifest,
    store: PseudoLabelStore,
    mode: str,
    batch_size: int,
    rng: np.random.Generator,
    loader: SampleLoader | None = None,
    augmentation: AugmentationConfig | None = None,
    **kwargs,
) -> TrainingBatch:
    """Draw a single batch; see :class:`BatchComposer` for the options."""
    loader = loader or SampleLoader()
    if augmentation is None:
        frame = loader.image(manifest.synthetic[0]).shape[-1]
        augmentation = AugmentationConfig(source_size=frame, crop_size=frame)
    composer = BatchComposer(manifest, loader, mode, batch_size, augmentation, rng, **kwargs)
    return composer.next_batch(store)


def extend_with_mixup(batch: TrainingBatch, alpha: float, rng: np.random.Generator) -> TrainingBatch:
    """Append one interpolated entry per original entry.

    Each new entry mixes an ordered pair ``(p, q)``, ``p != q``, drawn from
    the originals with ``lam ~ Beta(alpha, alpha)``; the triples are kept in
    ``mixup_log``.
    """
    m = len(batch)
    if m < 2:
        raise ContractError("mixup needs at least two entries")
    if Tag.INTERPOLATED in batch.tags:
        raise ContractError("batch has already been extended")
    imgs, masks, valids, log = [], [], [], []
    for _ in range(m):
        p, q = (int(v) for v in rng.choice(m, size=2, replace=False))
        lam = sample_mixup_lambda(alpha, rng)
        img, mask, valid = mixup_pair(batch.images[p], batch.targets[p], batch.validity[p],
                                      batch.images[q], batch.targets[q], batch.validity[q], lam)
        imgs.append(img)
        masks.append(mask)
        valids.append(valid)
        log.append((p, q, lam))
    return TrainingBatch(
        images=torch.cat([batch.images, torch.stack(imgs)]),
        targets=torch.cat([batch.targets, torch.stack(masks)]),
        validity=torch.cat([batch.validity, torch.stack(valids)]),
        tags=list(batch.tags) + [Tag.INTERPOLATED] * m,
        ids=list(batch.ids) + [f"mix:{batch.ids[p]}+{batch.ids[q]}" for p, q, _ in log],
        translation_real=batch.translation_real,
        mixup_log=log,
    )
