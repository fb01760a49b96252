"""Desk-scale ablation runs on the procedural toy dataset.

Trains tiny networks on 64x64 toy frames so the label-level and
pseudo-label trends of the method can be checked on a laptop CPU.
"""

from __future__ import annotations

import json
import logging
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .config import RunConfig
from .data import SELF_SUP, SEMI_SUP, ingest_dataset, make_split
from .toy import ToyCounts, generate_toy_dataset
from .trainer import VARIANTS, train

logger = logging.getLogger(__name__)

DESK_SETTINGS = {
    "train": {"epochs": 30, "batch_size": 8, "lr": 2e-4, "seg_lr": 1e-3, "mixup_alpha": 2.0},
    "augmentation": {"source_size": 64, "crop_size": 48},
    "translation": {"ngf": 8, "ndf": 8, "n_blocks": 2, "num_patches": 64, "embed_dim": 32},
    "segmentation": {"backbone": "unet", "base_channels": 8, "depth": 3},
    "eval": {"image_size": 64},
}


def desk_config(data_root: str | Path, variant: str, beta: float, seed: int,
                epochs: int | None = None, output_dir: str | Path = "runs/desk") -> RunConfig:
    doc = json.loads(json.dumps(DESK_SETTINGS))
    doc["train"].update(VARIANTS[variant], beta=float(beta), seed=seed,
                        mode=SELF_SUP if beta == 0 else SEMI_SUP)
    if epochs is not None:
        doc["train"]["epochs"] = epochs
    doc["data"] = {"test_sets": {"test": str(Path(data_root) / "test")}}
    doc["output_dir"] = str(output_dir)
    return RunConfig.from_dict(doc)


def toy_manifest(data_root: str | Path, beta: float, seed: int):
    root = Path(data_root)
    real = ingest_dataset(root / "real", "labeled-real", mask_dir=root / "real_masks")
    syn = ingest_dataset(root / "synthetic", "synthetic")
    return make_split(real, syn, beta, seed, dataset="toy")


@dataclass
class CellResult:
    variant: str
    beta: float
    best_mdice: list[float]
    final_mdice: list[float]

    @property
    def median_best(self) -> float:
        return statistics.median(self.best_mdice)


def run_desk_ablation(
    out_root: str | Path,
    cells: Sequence[tuple[str, float]],
    seeds: Sequence[int] = (0, 1, 2),
    epochs: int | None = None,
    data_seed: int = 0,
) -> dict[tuple[str, float], CellResult]:
    """Train every (variant, beta) cell for every seed; scores are test mDICE."""
    out_root = Path(out_root)
    data_root = out_root / "toy"
    if not (data_root / "test").is_dir():
        generate_toy_dataset(data_root, ToyCounts(200, 100, 40), size=64, seed=data_seed)
    results = {}
    for variant, beta in cells:
        best, final = [], []
        for seed in seeds:
            run_dir = out_root / f"{variant.replace(' ', '')}_b{int(beta)}_s{seed}"
            cfg = desk_config(data_root, variant, beta, seed, epochs, run_dir)
            res = train(cfg, toy_manifest(data_root, beta, seed))
            scores = [r.metrics["test"]["mdice"] for r in res.reports]
            best.append(max(scores))
            final.append(scores[-1])
            logger.info("%s beta=%s seed=%d best=%.4f final=%.4f", variant, beta, seed, best[-1], final[-1])
        results[(variant, beta)] = CellResult(variant, beta, best, final)
    return results
