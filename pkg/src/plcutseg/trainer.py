"""End-to-end two-step training of the translation and segmentation stages.

Step 1 updates the discriminator on real vs. translated images.  Step 2
backpropagates the generator's adversarial term, both PatchNCE terms and the
weighted segmentation loss jointly; it steps the generator, the patch
projector and the segmentation network, never the discriminator.  The
segmentation loss reaches the generator through the translated images.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .config import RunConfig, TrainConfig
from .core import LossValue
from .data import (
    SELF_SUP,
    SEMI_SUP,
    BatchComposer,
    DataError,
    PseudoLabelStore,
    SampleLoader,
    SampleRef,
    SplitManifest,
    Tag,
    TrainingBatch,
    extend_with_mixup,
    ingest_dataset,
    refresh_pseudo_labels,
)
from .evaluation import evaluate_model
from .segmentation import SegmentationNet, load_pretrained, predict_for_pseudo_labels, segmentation_objective
from .translation import (
    TranslationConfig,
    build_translation_nets,
    gan_losses,
    translation_objective,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "plcutseg-ckpt/1"


class TrainingAborted(RuntimeError):
    pass


@dataclass
class Nets:
    G: nn.Module
    D: nn.Module
    H: nn.Module
    U: SegmentationNet

    def modules(self) -> dict[str, nn.Module]:
        return {"G": self.G, "D": self.D, "H": self.H, "U": self.U}


@dataclass
class Optimizers:
    G: torch.optim.Optimizer
    D: torch.optim.Optimizer
    H: torch.optim.Optimizer
    U: torch.optim.Optimizer

    def state_dict(self) -> dict:
        return {k: getattr(self, k).state_dict() for k in "GDHU"}

    def load_state_dict(self, state: dict) -> None:
        for k in "GDHU":
            getattr(self, k).load_state_dict(state[k])


def build_nets(cfg: RunConfig) -> Nets:
    torch.manual_seed(cfg.train.seed)
    G, D, H = build_translation_nets(cfg.translation)
    U = SegmentationNet(cfg.segmentation.backbone, **cfg.segmentation.backbone_kwargs())
    if cfg.segmentation.pretrained:
        load_pretrained(U, torch.load(cfg.segmentation.pretrained, map_location="cpu"))
    device = torch.device(cfg.train.device)
    return Nets(G.to(device), D.to(device), H.to(device), U.to(device))


def build_optimizers(nets: Nets, cfg: TrainConfig) -> Optimizers:
    def adam(module, lr):
        return torch.optim.Adam(module.parameters(), lr=lr, betas=cfg.adam_betas)

    return Optimizers(adam(nets.G, cfg.lr), adam(nets.D, cfg.lr), adam(nets.H, cfg.lr), adam(nets.U, cfg.seg_lr))


def set_requires_grad(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


# --------------------------------------------------------------------------
# One optimization step


def discriminator_step(nets: Nets, optims: Optimizers, x_r: torch.Tensor, z_s: torch.Tensor) -> LossValue:
    """Step 1: least-squares discriminator update on real vs. translated images."""
    set_requires_grad(nets.D, True)
    optims.D.zero_grad(set_to_none=True)
    d_loss, _ = gan_losses(nets.D, x_r, z_s.detach())
    d_loss.total.backward()
    optims.D.step()
    return d_loss


def translate_batch(nets: Nets, batch: TrainingBatch, cfg: TrainConfig):
    """Run the generator on the batch's synthetic images (and the real ones
    when the real PatchNCE term is active)."""
    syn = batch.indices(Tag.SYNTHETIC)
    x_s = batch.images[syn]
    x_r = batch.translation_real
    if x_r is None:
        raise DataError("batch carries no real images for the translation stage")
    if cfg.lambda_xr > 0:
        z = nets.G(torch.cat([x_s, x_r]))
        return x_s, x_r, z[: len(syn)], z[len(syn):]
    return x_s, x_r, nets.G(x_s), None


def generator_objective(
    nets: Nets,
    batch: TrainingBatch,
    x_s: torch.Tensor,
    x_r: torch.Tensor,
    z_s: torch.Tensor,
    z_r: torch.Tensor | None,
    cfg: TrainConfig,
    tcfg: TranslationConfig,
    rng: np.random.Generator,
    torch_gen: torch.Generator | None = None,
) -> tuple[LossValue, TrainingBatch]:
    """Step-2 loss: GAN + PatchNCE terms + ``lambda_seg`` x segmentation.

    The synthetic entries of ``batch`` are replaced by the live translations
    ``z_s`` before mixup, so the segmentation term back-propagates into G.
    """
    trans = translation_objective(nets.G, nets.D, nets.H, x_s, x_r, cfg.lambda_xs, cfg.lambda_xr,
                                  tcfg, z_s=z_s, z_r=z_r, generator=torch_gen)
    seg_batch = batch.with_images(batch.indices(Tag.SYNTHETIC), z_s)
    if cfg.use_mixup:
        seg_batch = extend_with_mixup(seg_batch, cfg.mixup_alpha, rng)
    total = trans.total
    terms = dict(trans.terms)
    weights = dict(trans.weights)
    weights["seg"] = cfg.lambda_seg
    if cfg.lambda_seg > 0:
        seg = segmentation_objective(nets.U, seg_batch, cfg.dice_smoothing)
        total = total + cfg.lambda_seg * seg.total
        terms["seg"] = seg.total.item()
        for tag, value in seg.terms.items():
            terms_key = f"seg/{tag}"
            # per-tag breakdown is informational; weight 0 keeps the sum exact
            terms[terms_key] = value
            weights[terms_key] = 0.0
    else:
        terms["seg"] = 0.0
    return LossValue(total, terms, weights), seg_batch


def train_step(
    nets: Nets,
    optims: Optimizers,
    batch: TrainingBatch,
    cfg: TrainConfig,
    tcfg: TranslationConfig,
    rng: np.random.Generator,
    torch_gen: torch.Generator | None = None,
) -> tuple[LossValue, LossValue]:
    """One two-step update; returns ``(discriminator loss, generator-side loss)``."""
    x_s, x_r, z_s, z_r = translate_batch(nets, batch, cfg)
    d_loss = discriminator_step(nets, optims, x_r, z_s)

    set_requires_grad(nets.D, False)
    try:
        for opt in (optims.G, optims.H, optims.U):
            opt.zero_grad(set_to_none=True)
        g_loss, _ = generator_objective(nets, batch, x_s, x_r, z_s, z_r, cfg, tcfg, rng, torch_gen)
        for lv in (d_loss, g_loss):
            if not all(math.isfinite(v) for v in [lv.total.item(), *lv.terms.values()]):
                raise TrainingAborted(f"non-finite loss: total={float(lv.total)} terms={lv.terms}")
        g_loss.check()
        g_loss.total.backward()
        optims.G.step()
        optims.H.step()
        if cfg.lambda_seg > 0:
            optims.U.step()
    finally:
        set_requires_grad(nets.D, True)
    return d_loss, g_loss


# --------------------------------------------------------------------------
# Epoch loop


@dataclass
class EpochReport:
    epoch: int
    losses: dict[str, float]
    metrics: dict[str, dict[str, float]]
    duration: float
    store_version: int
    pseudo_versions_used: list[int] = field(default_factory=list)
    pseudo_foreground: float = 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainResult:
    nets: Nets
    store: PseudoLabelStore
    reports: list[EpochReport]
    loader: SampleLoader
    output_dir: Path | None
    best_score: float


def load_test_sets(cfg: RunConfig, names: Sequence[str] | None = None) -> dict[str, list[SampleRef]]:
    known = cfg.data.test_sets
    names = list(names) if names is not None else (cfg.eval.datasets or list(known))
    unknown = [n for n in names if n not in known]
    if unknown:
        raise DataError(f"unknown dataset(s) {unknown}; known: {sorted(known)}")
    return {n: ingest_dataset(known[n], "labeled-real", prefix=n) for n in names}


def _epoch_generators(seed: int, epoch: int):
    rng = np.random.default_rng([seed, epoch])
    gen = torch.Generator().manual_seed(int(seed) * 1_000_003 + epoch)
    torch.manual_seed(int(seed) * 7919 + epoch)
    return rng, gen


def save_checkpoint(path: Path, cfg: RunConfig, nets: Nets, optims: Optimizers, epoch: int,
                    store: PseudoLabelStore, best_score: float, reports: list[EpochReport]) -> None:
    state = {
        "format": CHECKPOINT_FORMAT,
        "epoch": epoch,
        "config": cfg.to_dict(),
        "nets": {k: m.state_dict() for k, m in nets.modules().items()},
        "optimizers": optims.state_dict(),
        "pseudo_labels": {"version": store.version, "masks": dict(store.masks)},
        "best_score": best_score,
        "reports": [r.to_dict() for r in reports],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(state, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict:
    state = torch.load(path, map_location="cpu", weights_only=False)
    if state.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: unsupported checkpoint format {state.get('format')!r}")
    return state


def restore(state: dict, cfg: RunConfig | None = None) -> tuple[RunConfig, Nets, Optimizers, PseudoLabelStore]:
    cfg = cfg or RunConfig.from_dict(state["config"])
    nets = build_nets(cfg)
    for k, m in nets.modules().items():
        m.load_state_dict(state["nets"][k])
    optims = build_optimizers(nets, cfg.train)
    optims.load_state_dict(state["optimizers"])
    pl = state["pseudo_labels"]
    return cfg, nets, optims, PseudoLabelStore(pl["masks"], pl["version"])


def load_segmentation_net(path: str | Path) -> tuple[SegmentationNet, RunConfig]:
    state = load_checkpoint(path)
    cfg = RunConfig.from_dict(state["config"])
    U = SegmentationNet(cfg.segmentation.backbone, **cfg.segmentation.backbone_kwargs())
    U.load_state_dict(state["nets"]["U"])
    return U.eval(), cfg


def load_generator(path: str | Path):
    state = load_checkpoint(path)
    cfg = RunConfig.from_dict(state["config"])
    G, _, _ = build_translation_nets(cfg.translation)
    G.load_state_dict(state["nets"]["G"])
    return G.eval(), cfg


def train(
    cfg: RunConfig,
    manifest: SplitManifest,
    test_sets: dict[str, list[SampleRef]] | None = None,
    resume: str | Path | None = None,
    output_dir: str | Path | None = None,
    loader: SampleLoader | None = None,
    progress: bool = False,
) -> TrainResult:
    """Run the full schedule.

    At the end of every epoch the pseudo-labels of the unlabeled set are
    recomputed with a clean forward pass (the store version therefore equals
    the number of finished epochs), the test sets are scored, and ``last.pt``
    plus ``best.pt`` (highest mDICE on the selection set) are written.
    """
    tc = cfg.train
    if tc.mode == SEMI_SUP and not manifest.labeled:
        raise DataError("semi-supervised training needs labeled samples in the manifest")
    out = Path(output_dir) if output_dir is not None else cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    test_sets = test_sets if test_sets is not None else load_test_sets(cfg)
    loader = loader or SampleLoader(frame_size=cfg.augmentation.source_size)
    frame = (cfg.augmentation.source_size, cfg.augmentation.source_size)

    if resume is not None:
        state = load_checkpoint(resume)
        _, nets, optims, store = restore(state, cfg)
        start = state["epoch"]
        best = state["best_score"]
        reports = [EpochReport(**r) for r in state["reports"]]
        logger.info("resumed from %s at epoch %d", resume, start)
    else:
        nets = build_nets(cfg)
        optims = build_optimizers(nets, tc)
        store = PseudoLabelStore.initial([r.id for r in manifest.unlabeled], frame)
        start, best, reports = 0, -1.0, []
    cfg.dump(out / "config.yaml")

    select_on = cfg.eval.select_on or (next(iter(test_sets)) if test_sets else None)
    log_path = out / "metrics.jsonl"
    if resume is None and log_path.exists():
        log_path.unlink()

    for epoch in range(start + 1, tc.epochs + 1):
        t0 = time.perf_counter()
        rng, gen = _epoch_generators(tc.seed, epoch)
        for m in nets.modules().values():
            m.train()
        composer = BatchComposer(
            manifest, loader, tc.mode, tc.batch_size, cfg.augmentation, rng,
            use_pseudo_labels=tc.use_pseudo_labels,
            confidence_threshold=tc.confidence_threshold if tc.use_confidence_mask else None,
        )
        epoch_store = store
        sums: dict[str, float] = defaultdict(float)
        n_steps = composer.batches_per_epoch()
        for _ in range(n_steps):
            batch = composer.next_batch(epoch_store)
            d_loss, g_loss = train_step(nets, optims, batch, tc, cfg.translation, rng, gen)
            sums["d"] += d_loss.item()
            sums["total"] += g_loss.item()
            for k, v in g_loss.terms.items():
                sums[k] += v

        if tc.use_pseudo_labels and manifest.unlabeled:
            preds = predict_for_pseudo_labels(nets.U, manifest.unlabeled, loader, cfg.augmentation.source_size)
        else:
            preds = {}
        store = refresh_pseudo_labels(store, preds)

        metrics = {}
        for name, refs in test_sets.items():
            res = evaluate_model(nets.U, refs, cfg.eval_image_size(), dataset=name,
                                 threshold=cfg.eval.threshold)
            metrics[name] = {"mdice": res.mdice, "iou": res.iou}
        fg = float(np.mean([float((m > 0.5).float().mean()) for m in store.masks.values()])) if len(store) else 0.0
        report = EpochReport(epoch, {k: v / n_steps for k, v in sums.items()}, metrics,
                             time.perf_counter() - t0, store.version, [epoch_store.version], fg)
        reports.append(report)
        with log_path.open("a") as fh:
            fh.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")

        score = metrics[select_on]["mdice"] if select_on in metrics else -1.0
        improved = score > best
        if improved:
            best = score
        save_checkpoint(out / "last.pt", cfg, nets, optims, epoch, store, best, reports)
        if improved:
            save_checkpoint(out / "best.pt", cfg, nets, optims, epoch, store, best, reports)
        if tc.keep_epoch_checkpoints:
            save_checkpoint(out / f"epoch_{epoch:04d}.pt", cfg, nets, optims, epoch, store, best, reports)
        if progress:
            shown = " ".join(f"{n}:{v['mdice']:.3f}/{v['iou']:.3f}" for n, v in metrics.items())
            logger.info("epoch %d/%d seg=%.4f d=%.4f %s (%.1fs)", epoch, tc.epochs,
                        report.losses.get("seg", 0.0), report.losses["d"], shown, report.duration)
    return TrainResult(nets, store, reports, loader, out, best)


# --------------------------------------------------------------------------
# Ablation grid

VARIANTS = {
    "CUT-Seg": dict(use_pseudo_labels=False, use_mixup=False, use_confidence_mask=False),
    "+ Pseudo-labels": dict(use_pseudo_labels=True, use_mixup=False, use_confidence_mask=False),
    "+ Pseudo-labels + MixUp": dict(use_pseudo_labels=True, use_mixup=True, use_confidence_mask=False),
    "+ Pseudo-labels + MixUp + Conf. Mask": dict(use_pseudo_labels=True, use_mixup=True,
                                                 use_confidence_mask=True),
}
LABEL_LEVELS = (0.0, 15.0, 30.0)


def variant_name(cfg: TrainConfig) -> str:
    flags = dict(use_pseudo_labels=cfg.use_pseudo_labels, use_mixup=cfg.use_mixup,
                 use_confidence_mask=cfg.use_confidence_mask)
    for name, v in VARIANTS.items():
        if v == flags:
            return name
    return "custom"


def ablation_grid(base: TrainConfig, label_levels: Sequence[float] = LABEL_LEVELS) -> list[TrainConfig]:
    """The 4 method variants x label levels; 0 % runs self-supervised."""
    out = []
    for flags in VARIANTS.values():
        for beta in label_levels:
            mode = SELF_SUP if beta == 0 else SEMI_SUP
            out.append(dataclasses.replace(copy.deepcopy(base), beta=float(beta), mode=mode, **flags))
    return out
