"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line."""

import math
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from plcutseg.core import confidence_mask, dice_loss, mixup_pair
from plcutseg.data import (
    BatchComposer,
    PseudoLabelStore,
    SampleLoader,
    Tag,
    compose_batch,
    extend_with_mixup,
    ingest_dataset,
    make_split,
)
from plcutseg.evaluation import render_report, report_from_csv, report_to_csv, score_folders
from plcutseg.segmentation import SegmentationNet, parameter_fingerprint, segmentation_objective
from plcutseg.translation import patchnce_from_features
from plcutseg import trainer
from plcutseg.trainer import (
    build_nets,
    build_optimizers,
    discriminator_step,
    train,
    train_step,
    translate_batch,
)

from conftest import criterion, tiny_config, write_masks
from test_core import brute_force_dice_loss
from test_evaluation import benchmark_grid


def _manifest(toy_root, beta=0.0):
    real = ingest_dataset(toy_root / "real", "labeled-real", mask_dir=toy_root / "real_masks")
    return make_split(real, ingest_dataset(toy_root / "synthetic", "synthetic"), beta, 0)


def test_criterion_01_dice_oracle():
    with criterion(1, "masked DICE loss equals the element-wise oracle on 1000 random 8x8 triples") as c:
        gen = np.random.default_rng(2024)
        t0 = time.perf_counter()
        worst, checked = 0.0, 0
        for _ in range(1000):
            pred = torch.from_numpy(gen.random((8, 8)))
            target = torch.from_numpy(gen.random((8, 8)))
            valid = torch.from_numpy(gen.random((8, 8)) < gen.uniform(0.05, 1.0))
            got = dice_loss(pred, target, valid, 1.0)
            if not valid.any():
                assert got is None
                continue
            worst = max(worst, abs(got.item() - brute_force_dice_loss(pred, target, valid, 1.0)))
            checked += 1
        elapsed = time.perf_counter() - t0
        c.detail = f"max abs err {worst:.1e} over {checked}, {elapsed:.2f}s"
        assert worst <= 1e-6
        assert elapsed < 10


def test_criterion_02_confidence_mask():
    with criterion(2, "confidence mask worked example and monotonicity over 1000 draws") as c:
        pred = torch.tensor([1.0, 0.9995, 0.5, 0.0005])
        assert confidence_mask(pred, 0.999).tolist() == [True, True, False, True]
        gen = np.random.default_rng(7)
        for _ in range(1000):
            p = torch.from_numpy(gen.random((8, 8)) ** gen.uniform(0.1, 10))
            lo, hi = sorted(gen.uniform(0.5 + 1e-9, 1.0, size=2))
            if lo == hi or hi >= 1.0:
                continue
            assert not (confidence_mask(p, hi) & ~confidence_mask(p, lo)).any()
        c.detail = "subset property held"


def test_criterion_03_mixup_batch(toy_root):
    with criterion(3, "mixup doubles M=4 to 8, keeps originals, entries rebuild from (p,q,lambda)") as c:
        m = _manifest(toy_root, 30.0)
        store = PseudoLabelStore.initial([r.id for r in m.unlabeled], (32, 32))
        worst = 0.0
        for seed in range(5):
            rng = np.random.default_rng(seed)
            b = compose_batch(m, store, "semi-sup", 4, rng)
            ext = extend_with_mixup(b, 2.0, rng)
            assert len(b) == 4 and len(ext) == 8
            assert torch.equal(ext.images[:4], b.images) and torch.equal(ext.targets[:4], b.targets)
            assert len(ext.mixup_log) == 4
            for n, (p, q, lam) in enumerate(ext.mixup_log):
                img, mask, valid = mixup_pair(b.images[p], b.targets[p], b.validity[p],
                                              b.images[q], b.targets[q], b.validity[q], lam)
                worst = max(worst, (ext.images[4 + n] - img).abs().max().item(),
                            (ext.targets[4 + n] - mask).abs().max().item())
                assert torch.equal(ext.validity[4 + n], valid)
        c.detail = f"max reconstruction err {worst:.1e}"
        assert worst <= 1e-6


def test_criterion_04_patchnce_degenerate():
    with criterion(4, "PatchNCE with 16 identical features equals ln(16) per location") as c:
        feat = F.normalize(torch.randn(1, 1, 32), dim=-1).expand(3, 16, 32).contiguous()
        loss = patchnce_from_features(feat, feat, 0.07)
        err = (loss - math.log(16)).abs().max().item()
        c.detail = f"max err {err:.1e}"
        assert loss.shape == (3, 16) and err <= 1e-5


def test_criterion_05_gradient_routing(toy_root):
    with criterion(5, "step 1 moves only D; step 2 moves G, H, U and not D; lambda_S=0 freezes U") as c:
        t0 = time.perf_counter()
        m = _manifest(toy_root)
        store = PseudoLabelStore.initial([r.id for r in m.unlabeled], (32, 32))

        def setup(**over):
            cfg = tiny_config(train=over)
            nets = build_nets(cfg)
            optims = build_optimizers(nets, cfg.train)
            batch = BatchComposer(m, SampleLoader(32), "self-sup", 4, cfg.augmentation,
                                  np.random.default_rng(0)).next_batch(store)
            return cfg, nets, optims, batch

        def hashes(nets):
            return {k: parameter_fingerprint(v) for k, v in nets.modules().items()}

        cfg, nets, optims, batch = setup()
        h0 = hashes(nets)
        _, x_r, z_s, _ = translate_batch(nets, batch, cfg.train)
        discriminator_step(nets, optims, x_r, z_s)
        h1 = hashes(nets)
        assert h1["D"] != h0["D"] and all(h1[k] == h0[k] for k in "GHU")

        # step 2 after the identical step 1: D must match the step-1-only state
        cfg, nets, optims, batch = setup()
        train_step(nets, optims, batch, cfg.train, cfg.translation, np.random.default_rng(0))
        h2 = hashes(nets)
        assert h2["D"] == h1["D"]
        assert all(h2[k] != h0[k] for k in "GHU")

        cfg, nets, optims, batch = setup(lambda_seg=0.0)
        train_step(nets, optims, batch, cfg.train, cfg.translation, np.random.default_rng(0))
        assert hashes(nets)["U"] == h0["U"]
        elapsed = time.perf_counter() - t0
        c.detail = f"{elapsed:.1f}s"
        assert elapsed < 60


def test_criterion_06_gradient_correctness():
    with criterion(6, "segmentation objective gradients match central differences (rel 1e-4)") as c:
        gen = torch.Generator().manual_seed(11)
        images = torch.rand(6, 3, 8, 8, generator=gen, dtype=torch.float64) * 2 - 1
        targets = torch.rand(6, 8, 8, generator=gen, dtype=torch.float64)
        validity = torch.rand(6, 8, 8, generator=gen) < 0.7
        tags = [Tag.SYNTHETIC, Tag.SYNTHETIC, Tag.REAL_LABELED, Tag.REAL_PSEUDO, Tag.INTERPOLATED, Tag.INTERPOLATED]
        from plcutseg.data import TrainingBatch

        batch = TrainingBatch(images, targets, validity, tags, [str(i) for i in range(6)])
        U = SegmentationNet("channel-affine", weight=0.8, bias=-0.2).double()
        segmentation_objective(U, batch).total.backward()
        worst = 0.0
        for p in (U.backbone.weight, U.backbone.bias):
            h = 1e-6
            with torch.no_grad():
                p += h
                up = segmentation_objective(U, batch).total.item()
                p -= 2 * h
                down = segmentation_objective(U, batch).total.item()
                p += h
            numeric = (up - down) / (2 * h)
            worst = max(worst, abs(p.grad.item() - numeric) / max(abs(numeric), 1e-12))
        c.detail = f"max rel err {worst:.1e}"
        assert worst <= 1e-4


@pytest.fixture(scope="module")
def three_epoch_run(toy_root, tmp_path_factory, monkeypatch_module):
    seen: list[tuple[int, bool]] = []
    original = BatchComposer.next_batch

    def recording(self, store):
        batch = original(self, store)
        pseudo = batch.indices(Tag.REAL_PSEUDO)
        seen.append((store.version, bool(pseudo) and not batch.targets[pseudo].any()))
        return batch

    monkeypatch_module.setattr(trainer.BatchComposer, "next_batch", recording)
    cfg = tiny_config(train={"epochs": 3}, data={"test_sets": {"test": str(toy_root / "test")}})
    m = _manifest(toy_root)
    res = train(cfg, m, output_dir=tmp_path_factory.mktemp("acc3"), loader=SampleLoader(32))
    return m, res, seen


@pytest.fixture(scope="module")
def monkeypatch_module():
    mp = pytest.MonkeyPatch()
    yield mp
    mp.undo()


def test_criterion_07_label_scarcity(three_epoch_run, toy_root):
    with criterion(7, "zero reads of unlabeled ground truth in a 3-epoch self-supervised run") as c:
        m, res, _ = three_epoch_run
        reads = sum(res.loader.mask_reads[r.id] for r in m.unlabeled)
        gt_files = {str((toy_root / "real_masks" / r.image_path.name).resolve()) for r in m.unlabeled}
        path_reads = sum(res.loader.mask_path_reads[f] for f in gt_files)
        c.detail = f"{len(m.unlabeled)} unlabeled samples, id reads {reads}, file reads {path_reads}"
        assert len(res.reports) == 3
        assert reads == 0 and path_reads == 0


def test_criterion_08_pseudo_label_protocol(three_epoch_run):
    with criterion(8, "epoch 1 uses only all-background pseudo-labels; store version equals epochs") as c:
        _, res, seen = three_epoch_run
        epoch1 = [all_bg for version, all_bg in seen if version == 0]
        c.detail = f"{len(epoch1)} epoch-1 batches, final version {res.store.version}"
        assert epoch1 and all(epoch1)
        assert [r.pseudo_versions_used for r in res.reports] == [[0], [1], [2]]
        assert res.store.version == 3


BASE, PL, FULL = "CUT-Seg", "+ Pseudo-labels", "+ Pseudo-labels + MixUp + Conf. Mask"
DESK_CELLS = [(BASE, 0.0), (PL, 0.0), (PL, 15.0), (PL, 30.0), (FULL, 0.0)]


@pytest.mark.slow
def test_criterion_09_desk_ablation(tmp_path_factory):
    from plcutseg.desk import run_desk_ablation

    with criterion(9, "desk ablation: pseudo-labels beat baseline at 0%; 30% >= 15% >= 0%") as c:
        t0 = time.perf_counter()
        res = run_desk_ablation(tmp_path_factory.mktemp("desk"), DESK_CELLS, seeds=(0, 1, 2), epochs=30)
        per_run = (time.perf_counter() - t0) / (len(DESK_CELLS) * 3)
        med = {cell: r.median_best for cell, r in res.items()}
        base, pl0, pl15, pl30 = med[(BASE, 0.0)], med[(PL, 0.0)], med[(PL, 15.0)], med[(PL, 30.0)]
        # the full variant is reported for context only
        c.detail = (f"median best mDICE: CUT-Seg@0 {base:.4f}, PL@0 {pl0:.4f}, PL@15 {pl15:.4f}, "
                    f"PL@30 {pl30:.4f}, full@0 {med[(FULL, 0.0)]:.4f}; {per_run / 60:.1f} min/run")
        for (variant, beta), r in res.items():
            print(f"{variant} @ {beta:g}%: best {[round(v, 4) for v in r.best_mdice]}, "
                  f"final {[round(v, 4) for v in r.final_mdice]}")
        assert per_run <= 15 * 60
        assert pl0 - base > 0
        assert pl30 >= pl15 >= pl0


def test_criterion_10_evaluation_sanity(tmp_path):
    with criterion(10, "score_folders self-score 1/1, DICE >= IoU, half overlap 2/3 and 1/2") as c:
        gen = np.random.default_rng(5)
        masks = {f"m{i}": gen.random((16, 16)) > gen.uniform(0.2, 0.9) for i in range(20)}
        masks["empty"] = np.zeros((16, 16), bool)
        gt = write_masks(tmp_path / "gt", masks)
        same = score_folders(gt, gt)
        assert (same.mdice, same.iou) == (1.0, 1.0)
        other = write_masks(tmp_path / "other", {k: gen.random((16, 16)) > 0.5 for k in masks})
        mixed = score_folders(other, gt)
        assert all(d >= j for d, j in zip(mixed.dice_per_sample, mixed.iou_per_sample))
        full = np.ones((10, 10), bool)
        left = np.zeros((10, 10), bool)
        left[:, :5] = True
        half = score_folders(write_masks(tmp_path / "hp", {"a": left}), write_masks(tmp_path / "hg", {"a": full}))
        c.detail = f"half overlap {half.mdice:.6f} / {half.iou:.6f}"
        assert half.mdice == pytest.approx(2 / 3, abs=1e-12) and half.iou == pytest.approx(0.5, abs=1e-12)


def test_criterion_11_report_roundtrip():
    with criterion(11, "benchmark grid round-trips; PL-CUT-Seg+ / 30% / Kvasir renders 86.94 / 79.58") as c:
        grid = benchmark_grid()
        text = render_report(grid)
        back = report_from_csv(report_to_csv(grid))
        assert render_report(back) == text
        assert [r.values for r in back.rows] == [r.values for r in grid.rows]
        row = next(ln for ln in text.splitlines() if ln.startswith("PL-CUT-Seg+ ") and " 30% " in ln)
        c.detail = row.split()[2] + " / " + row.split()[3]
        assert row.split()[2:4] == ["86.94", "79.58"]
