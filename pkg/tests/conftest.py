from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from plcutseg.config import RunConfig
from plcutseg.toy import ToyCounts, generate_toy_dataset

torch.set_num_threads(1)

TINY = {
    "train": {"epochs": 1, "batch_size": 4, "lr": 2e-4, "seg_lr": 1e-3},
    "augmentation": {"source_size": 32, "crop_size": 32},
    "translation": {"ngf": 4, "ndf": 4, "n_blocks": 1, "num_patches": 16, "embed_dim": 8},
    "segmentation": {"backbone": "unet", "base_channels": 4, "depth": 2},
}


def tiny_config(tmp_path=None, **overrides) -> RunConfig:
    import copy

    doc = copy.deepcopy(TINY)
    for section, values in overrides.items():
        if isinstance(values, dict):
            doc.setdefault(section, {}).update(values)
        else:
            doc[section] = values
    if tmp_path is not None:
        doc.setdefault("output_dir", str(tmp_path / "run"))
    return RunConfig.from_dict(doc)


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("toy")
    generate_toy_dataset(root, ToyCounts(12, 10, 4), size=32, seed=3)
    return root


def write_masks(directory: Path, masks: dict[str, np.ndarray]) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    for name, m in masks.items():
        Image.fromarray((np.asarray(m) > 0).astype(np.uint8) * 255, mode="L").save(directory / f"{name}.png")
    return directory


def write_images(directory: Path, images: dict[str, np.ndarray]) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    for name, im in images.items():
        Image.fromarray(np.asarray(im, dtype=np.uint8), mode="RGB").save(directory / f"{name}.png")
    return directory


def red_channel_dataset(root: Path, n: int = 4, size: int = 16, seed: int = 0) -> Path:
    """Images whose red channel equals the mask: a perfect stub can read it off."""
    gen = np.random.default_rng(seed)
    images, masks = {}, {}
    for i in range(n):
        m = np.zeros((size, size), dtype=bool)
        y, x = gen.integers(0, size // 2, size=2)
        m[y:y + size // 3, x:x + size // 4] = True
        im = gen.integers(0, 256, size=(size, size, 3)).astype(np.uint8)
        im[..., 0] = m * 255
        images[f"s{i}"], masks[f"s{i}"] = im, m
    write_images(root / "images", images)
    write_masks(root / "masks", masks)
    return root


ACCEPTANCE: dict[int, str] = {}


class criterion:
    """Records one PASS/FAIL line for an acceptance criterion."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        note = self.detail if exc_type is None else (self.detail + " " if self.detail else "") + f"({exc_type.__name__}: {exc})"
        ACCEPTANCE[self.number] = f"criterion {self.number:>2} {status}  {self.title}" + (f"  [{note.strip()}]" if note.strip() else "")
        return False


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
