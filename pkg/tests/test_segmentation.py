import pytest
import torch

from plcutseg.core import ContractError, dice_loss
from plcutseg.data import SampleLoader, Tag, TrainingBatch, ingest_dataset, refresh_pseudo_labels, PseudoLabelStore
from plcutseg.segmentation import (
    SegmentationNet,
    parameter_fingerprint,
    predict,
    predict_for_pseudo_labels,
    segmentation_objective,
)


def _batch(n=4, size=8, seed=0, dtype=torch.float32, tags=None, validity=None):
    g = torch.Generator().manual_seed(seed)
    images = (torch.rand(n, 3, size, size, generator=g) * 2 - 1).to(dtype)
    targets = torch.rand(n, size, size, generator=g).to(dtype)
    if validity is None:
        validity = torch.rand(n, size, size, generator=g) < 0.8
    tags = tags or [Tag.SYNTHETIC] * (n // 2) + [Tag.REAL_PSEUDO] * (n - n // 2)
    return TrainingBatch(images, targets, validity, tags, [f"i{k}" for k in range(n)])


# --------------------------------------------------------------------- predict

def test_predict_shape_bounds_and_determinism():
    torch.manual_seed(0)
    U = SegmentationNet("unet", base_channels=4, depth=3)
    x = torch.rand(3, 3, 16, 16) * 2 - 1
    p = predict(U, x)
    assert p.shape == (3, 16, 16)
    assert p.min() >= 0 and p.max() <= 1
    assert torch.equal(p, predict(U, x))
    assert U.training  # mode restored
    assert predict(U, x[0]).shape == (16, 16)


def test_unet_rejects_indivisible_input():
    U = SegmentationNet("unet", base_channels=4, depth=3)
    with pytest.raises(ContractError):
        U(torch.zeros(1, 3, 18, 18))


def test_unknown_backbone():
    with pytest.raises(ContractError, match="known"):
        SegmentationNet("hardnet")


# --------------------------------------------------------------------- objective

def test_objective_is_mean_over_contributing_entries():
    U = SegmentationNet("channel-affine", weight=2.0, bias=-0.5)
    b = _batch()
    b.validity[1] = False
    lv = segmentation_objective(U, b)
    probs = torch.sigmoid(U(b.images))[:, 0]
    per = [dice_loss(probs[i], b.targets[i], b.validity[i]) for i in range(4)]
    expected = sum(v.item() for v in per if v is not None) / 3
    assert lv.item() == pytest.approx(expected, rel=1e-6)
    lv.check()
    assert lv.weights == pytest.approx({"synthetic": 1 / 3, "real-pseudo": 2 / 3})


def test_objective_all_invalid_raises():
    b = _batch(validity=torch.zeros(4, 8, 8, dtype=torch.bool))
    with pytest.raises(ContractError):
        segmentation_objective(SegmentationNet("constant"), b)


def test_objective_perfect_predictions_near_zero():
    b = _batch()
    hard = (b.images[:, 0] > 0).float()
    b = TrainingBatch(b.images, hard, torch.ones_like(b.validity), b.tags, b.ids)
    U = SegmentationNet("channel-affine", weight=1000.0, bias=0.0)
    assert segmentation_objective(U, b).item() < 1e-3


def test_objective_order_invariant():
    U = SegmentationNet("channel-affine", weight=1.5, bias=0.2)
    b = _batch(n=6, seed=3)
    perm = [4, 0, 5, 2, 1, 3]
    shuffled = TrainingBatch(b.images[perm], b.targets[perm], b.validity[perm],
                             [b.tags[i] for i in perm], [b.ids[i] for i in perm])
    assert segmentation_objective(U, b).item() == pytest.approx(segmentation_objective(U, shuffled).item(), rel=1e-6)


def test_objective_gradient_matches_finite_differences():
    U = SegmentationNet("channel-affine", weight=0.7, bias=-0.3).double()
    b = _batch(n=4, dtype=torch.float64, seed=5)
    loss = segmentation_objective(U, b).total
    loss.backward()
    analytic = torch.stack([U.backbone.weight.grad, U.backbone.bias.grad])
    h = 1e-6
    numeric = []
    for p in (U.backbone.weight, U.backbone.bias):
        with torch.no_grad():
            p += h
            up = segmentation_objective(U, b).total.item()
            p -= 2 * h
            down = segmentation_objective(U, b).total.item()
            p += h
        numeric.append((up - down) / (2 * h))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    assert torch.allclose(analytic, numeric, rtol=1e-4, atol=1e-10)


def test_objective_gradcheck_unet_float64():
    torch.manual_seed(0)
    U = SegmentationNet("unet", base_channels=2, depth=2).double().eval()
    b = _batch(n=2, dtype=torch.float64, seed=7)
    params = list(U.parameters())[:2]
    loss = segmentation_objective(U, b).total
    grads = torch.autograd.grad(loss, params)
    for p, g in zip(params, grads):
        flat = p.detach().clone().view(-1)
        for j in range(min(5, flat.numel())):
            h = 1e-6
            orig = flat[j].item()
            with torch.no_grad():
                p.view(-1)[j] = orig + h
                up = segmentation_objective(U, b).total.item()
                p.view(-1)[j] = orig - h
                down = segmentation_objective(U, b).total.item()
                p.view(-1)[j] = orig
            num = (up - down) / (2 * h)
            assert g.view(-1)[j].item() == pytest.approx(num, rel=1e-4, abs=1e-9)


# --------------------------------------------------------------------- pseudo-label inference

def test_pseudo_label_prediction_leaves_weights_untouched(toy_root):
    torch.manual_seed(0)
    U = SegmentationNet("unet", base_channels=4, depth=2)
    refs = ingest_dataset(toy_root / "real", "unlabeled-real")
    before = parameter_fingerprint(U)
    preds = predict_for_pseudo_labels(U, refs, SampleLoader(32), 32)
    assert parameter_fingerprint(U) == before
    assert set(preds) == {r.id for r in refs}
    assert all(p.shape == (32, 32) and 0 <= p.min() and p.max() <= 1 for p in preds.values())


def test_constant_stub_pseudo_labels(toy_root):
    refs = ingest_dataset(toy_root / "real", "unlabeled-real")
    U = SegmentationNet("constant", logit=0.0)
    store = PseudoLabelStore.initial([r.id for r in refs], (32, 32))
    store = refresh_pseudo_labels(store, predict_for_pseudo_labels(U, refs, SampleLoader(32), 16))
    assert store.version == 1
    for r in refs:
        assert torch.allclose(store[r.id], torch.full((32, 32), 0.5))


def test_fingerprint_sensitive_to_buffers():
    U = SegmentationNet("unet", base_channels=2, depth=2)
    before = parameter_fingerprint(U)
    U(torch.rand(2, 3, 8, 8))  # train-mode forward updates batch-norm statistics
    assert parameter_fingerprint(U) != before
