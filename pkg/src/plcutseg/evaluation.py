"""Benchmark scoring (mDICE / IoU) and tabular report rendering."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .core import EVAL_THRESHOLD, dice_score, iou
from .data import IMAGE_SUFFIXES, DataError, SampleLoader, SampleRef, eval_preprocess, load_mask
from .segmentation import predict


@dataclass
class BenchmarkResult:
    dataset: str
    count: int
    mdice: float
    iou: float
    dice_per_sample: list[float] = field(default_factory=list)
    iou_per_sample: list[float] = field(default_factory=list)
    ids: list[str] = field(default_factory=list)

    @classmethod
    def from_scores(cls, dataset: str, ids, dices, ious) -> "BenchmarkResult":
        dices, ious = list(map(float, dices)), list(map(float, ious))
        if not dices:
            raise DataError(f"{dataset}: nothing to score")
        return cls(dataset, len(dices), float(np.mean(dices)), float(np.mean(ious)),
                   dices, ious, list(ids))

    def as_dict(self) -> dict:
        return {"dataset": self.dataset, "count": self.count, "mdice": self.mdice, "iou": self.iou}


def score_pair(pred: np.ndarray, gt: np.ndarray, threshold: float = EVAL_THRESHOLD) -> tuple[float, float]:
    return dice_score(pred, gt, threshold), iou(pred, gt, threshold)


def evaluate_model(
    U: nn.Module,
    refs: Sequence[SampleRef],
    image_size: int,
    dataset: str = "test",
    threshold: float = EVAL_THRESHOLD,
    batch_size: int = 16,
) -> BenchmarkResult:
    """Score a segmentation network on labeled refs.

    Images are resized to ``image_size`` and normalized; the soft prediction
    is resized back to the ground-truth resolution (the ground truth itself
    is never resampled) and binarized at ``threshold``.
    """
    missing = [r.id for r in refs if r.mask_path is None]
    if missing:
        raise DataError(f"{dataset}: test samples without ground truth: {missing[:5]}")
    loader = SampleLoader(frame_size=None, cache=False)
    device = next(U.parameters()).device
    ids, dices, ious = [], [], []
    for start in range(0, len(refs), batch_size):
        chunk = refs[start:start + batch_size]
        frames = [loader.image(r) for r in chunk]
        x = torch.stack([eval_preprocess(f, image_size) for f in frames]).to(device)
        probs = predict(U, x).cpu()
        for ref, p in zip(chunk, probs):
            gt = loader.mask(ref)
            if p.shape != gt.shape:
                p = F.interpolate(p[None, None], size=gt.shape, mode="bilinear", align_corners=False)[0, 0]
            d, j = score_pair(p.numpy(), gt.numpy(), threshold)
            ids.append(ref.id)
            dices.append(d)
            ious.append(j)
    return BenchmarkResult.from_scores(dataset, ids, dices, ious)


def _mask_files(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def score_folders(pred_dir: str | os.PathLike, gt_dir: str | os.PathLike, dataset: str | None = None,
                  threshold: float = EVAL_THRESHOLD) -> BenchmarkResult:
    """Score dumped prediction masks against ground-truth masks, matched by stem.

    Predictions of a different size are resized to the ground truth with
    nearest-neighbour sampling.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds, gts = _mask_files(pred_dir), _mask_files(gt_dir)
    unmatched = sorted(set(preds) ^ set(gts))
    if unmatched:
        raise DataError(f"unmatched mask files between {pred_dir} and {gt_dir}: {', '.join(unmatched)}")
    if not gts:
        raise DataError(f"{gt_dir}: no masks found")
    ids, dices, ious = [], [], []
    for stem in sorted(gts):
        gt = load_mask(gts[stem]).numpy()
        with Image.open(preds[stem]) as im:
            im = im.convert("L")
            if im.size != (gt.shape[1], gt.shape[0]):
                im = im.resize((gt.shape[1], gt.shape[0]), Image.NEAREST)
            pred = (np.asarray(im, dtype=np.float32) > 127.5).astype(np.float32)
        d, j = score_pair(pred, gt, threshold)
        ids.append(stem)
        dices.append(d)
        ious.append(j)
    return BenchmarkResult.from_scores(dataset or gt_dir.name, ids, dices, ious)


# --------------------------------------------------------------------------
# Reports

METRIC_LABELS = {"mdice": "mDICE", "iou": "IoU"}


@dataclass
class ReportRow:
    method: str
    labels: str
    values: dict[tuple[str, str], float]


@dataclass
class ReportGrid:
    """Rows of (method, label level) against columns of (dataset, metric).

    Values are fractions in [0, 1]; they are printed as percentages.
    """

    datasets: list[str]
    metrics: list[str]
    rows: list[ReportRow] = field(default_factory=list)

    def columns(self) -> list[tuple[str, str]]:
        return [(d, m) for d in self.datasets for m in self.metrics]

    def add(self, method: str, labels: str, results: Iterable[BenchmarkResult]) -> None:
        values = {}
        for r in results:
            for m in self.metrics:
                values[(r.dataset, m)] = getattr(r, m)
        self.rows.append(ReportRow(method, labels, values))

    def validate(self) -> None:
        if not self.rows:
            raise ValueError("empty report grid")
        cols = set(self.columns())
        for row in self.rows:
            if set(row.values) != cols:
                missing = sorted(cols - set(row.values))
                extra = sorted(set(row.values) - cols)
                raise ValueError(f"ragged grid at row {row.method!r}/{row.labels!r}: "
                                 f"missing {missing}, unexpected {extra}")


def render_report(grid: ReportGrid) -> str:
    """Aligned plain-text table, one row per method and label level."""
    grid.validate()
    cols = grid.columns()
    head1 = ["", ""] + [d if i == 0 else "" for d in grid.datasets for i, _ in enumerate(grid.metrics)]
    head2 = ["Method", "Labels"] + [METRIC_LABELS.get(m, m) for _, m in cols]
    body = [[r.method, r.labels] + [f"{100 * r.values[c]:.2f}" for c in cols] for r in grid.rows]
    table = [head1, head2] + body
    widths = [max(len(row[i]) for row in table) for i in range(len(head2))]

    def fmt(row):
        left = [row[0].ljust(widths[0]), row[1].rjust(widths[1])]
        return "  ".join(left + [c.rjust(w) for c, w in zip(row[2:], widths[2:])]).rstrip()

    rule = "-" * len(fmt(head2))
    return "\n".join([fmt(head1), fmt(head2), rule] + [fmt(r) for r in body]) + "\n"


def report_to_csv(grid: ReportGrid) -> str:
    """Machine-readable companion: one column per ``dataset:metric``, exact floats."""
    grid.validate()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "labels"] + [f"{d}:{m}" for d, m in grid.columns()])
    for r in grid.rows:
        w.writerow([r.method, r.labels] + [repr(r.values[c]) for c in grid.columns()])
    return buf.getvalue()


def report_from_csv(text: str) -> ReportGrid:
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    cols = [tuple(h.rsplit(":", 1)) for h in header[2:]]
    datasets = list(dict.fromkeys(d for d, _ in cols))
    metrics = list(dict.fromkeys(m for _, m in cols))
    grid = ReportGrid(datasets, metrics)
    for rec in body:
        grid.rows.append(ReportRow(rec[0], rec[1], {c: float(v) for c, v in zip(cols, rec[2:])}))
    grid.validate()
    return grid
