"""Structured run configuration with strict key checking.

Every field has a default except the data paths.  Unknown keys anywhere in
the document raise :class:`ConfigError` naming the offending key path.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_type_hints

import yaml

from .data import MODES, AugmentationConfig
from .translation import TranslationConfig

OUTPUT_DIR_ENV = "PLCUTSEG_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    mode: str = "self-sup"
    beta: float = 0.0
    lr: float = 1e-5
    seg_lr: float = 1e-5
    adam_betas: tuple[float, float] = (0.9, 0.999)
    epochs: int = 300
    batch_size: int = 4
    mixup_alpha: float = 2.0
    confidence_threshold: float = 0.999
    lambda_xs: float = 1.0
    lambda_xr: float = 1.0
    lambda_seg: float = 1.0
    use_pseudo_labels: bool = True
    use_mixup: bool = True
    use_confidence_mask: bool = True
    dice_smoothing: float = 1.0
    seed: int = 0
    keep_epoch_checkpoints: bool = False
    device: str = "cpu"

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if self.mode not in MODES:
            raise ConfigError(f"train.mode: expected one of {MODES}, got {self.mode!r}")
        for key in ("lr", "seg_lr", "lambda_xs", "lambda_xr", "lambda_seg", "mixup_alpha", "dice_smoothing"):
            if getattr(self, key) < 0:
                raise ConfigError(f"train.{key}: must be >= 0")
        if self.mixup_alpha <= 0:
            raise ConfigError("train.mixup_alpha: must be > 0")
        if not 0.5 < self.confidence_threshold < 1.0:
            raise ConfigError("train.confidence_threshold: must lie in (0.5, 1)")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("train.batch_size: must be even and >= 2")
        if not 0 <= self.beta <= 100:
            raise ConfigError("train.beta: must lie in [0, 100]")


@dataclass
class SegmentationConfig:
    backbone: str = "unet"
    base_channels: int = 16
    depth: int = 4
    pretrained: str | None = None

    def backbone_kwargs(self) -> dict[str, Any]:
        if self.backbone == "unet":
            return {"base_channels": self.base_channels, "depth": self.depth}
        return {}


@dataclass
class DataConfig:
    manifest: str | None = None
    test_sets: dict[str, str] = field(default_factory=dict)
    workers: int = 0


@dataclass
class EvalConfig:
    datasets: list[str] | None = None
    threshold: float = 0.5
    image_size: int | None = None
    select_on: str | None = None


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    translation: TranslationConfig = field(default_factory=TranslationConfig)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_DIR_ENV) or self.output_dir)

    def eval_image_size(self) -> int:
        return self.eval.image_size or self.augmentation.crop_size

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, doc: dict | None) -> "RunConfig":
        return _build(cls, doc or {}, "")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        doc = yaml.safe_load(path.read_text()) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = cls.from_dict(doc)
        # relative data paths are relative to the config file
        base = path.parent
        if cfg.data.manifest and not Path(cfg.data.manifest).is_absolute():
            cfg.data.manifest = str(base / cfg.data.manifest)
        cfg.data.test_sets = {k: v if Path(v).is_absolute() else str(base / v)
                              for k, v in cfg.data.test_sets.items()}
        return cfg

    def dump(self, path: str | os.PathLike) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _to_plain(obj):
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, doc: dict, prefix: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{prefix.rstrip('.') or '<root>'}: expected a mapping")
    hints = get_type_hints(cls)
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - fields)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in doc.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, f"{prefix}{name}.")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or '<root>'}: {exc}") from exc
