"""Experiment configuration.

Every training hyperparameter has a named key whose default is the
clinical-scale value; :func:`desk_profile` gives the small CPU-sized variant
used by the tests and demos. Config files are YAML (JSON also parses)::

    setting: s_plus_t
    lambda0: 0.01
    epochs: 200
    seg_width: 8
    transforms:
      p_translate: 0.1
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .transforms import TransformConfig

SETTINGS = ("basic", "s", "s_plus", "s_plus_t", "mean_teacher", "self_training")


class ConfigError(ValueError):
    """The experiment cannot run as configured."""


@dataclass(frozen=True)
class ExperimentConfig:
    setting: str = "basic"
    lambda0: float = 0.01
    lambda1: float | None = None  # overrides lambda0 for the spatial term
    lambda2: float | None = None  # overrides lambda0 for the temporal term
    delta_t: int = 5
    batch_size: int = 16
    epochs: int = 5000
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    warmup_epochs: int = 10
    ema_alpha: float = 0.99
    teacher_student: bool = True
    seed: int = 0
    # data and folds
    data_dir: str | None = None
    out_dir: str = "runs/experiment"
    fold: int = 0
    num_folds: int = 5
    fold_seed: int = 0
    val_fraction: float = 0.2
    subsample: int | None = None
    val_every: int = 1
    # networks
    seg_width: int = 16
    seg_depth: int = 4
    reg_width: int = 16
    reg_depth: int = 4
    # registration pretraining
    reg_checkpoint: str | None = None
    reg_epochs: int = 100
    reg_steps_per_epoch: int = 10
    reg_batch_size: int = 4
    reg_learning_rate: float = 1e-3
    reg_lambda: float = 1.0
    reg_window: int = 5
    # self-training
    stage1_checkpoint: str | None = None
    transforms: TransformConfig = field(default_factory=TransformConfig)

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ConfigError(f"unknown setting {self.setting!r}; choose from {SETTINGS}")
        if self.delta_t < 1:
            raise ConfigError("delta_t must be >= 1")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be even (half labeled, half unlabeled)")
        if self.lambda0 < 0:
            raise ConfigError("lambda0 must be >= 0")
        if not 0 <= self.ema_alpha <= 1:
            raise ConfigError("ema_alpha must be in [0, 1]")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epochs must be >= 0")

    @property
    def spatial_weight(self) -> float:
        return self.lambda0 if self.lambda1 is None else self.lambda1

    @property
    def temporal_weight(self) -> float:
        return self.lambda0 if self.lambda2 is None else self.lambda2

    def with_(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["transforms"] = dataclasses.asdict(self.transforms)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        tr = data.pop("transforms", None) or {}
        if isinstance(tr, dict):
            tkeys = {f.name for f in fields(TransformConfig)}
            if set(tr) - tkeys:
                raise ConfigError(f"unknown transform keys: {sorted(set(tr) - tkeys)}")
            tr = TransformConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in tr.items()})
        return cls(transforms=tr, **data)

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def desk_profile(**overrides) -> ExperimentConfig:
    """Small-scale settings: width-8 networks, 200 epochs, faster registration."""
    base = dict(seg_width=8, reg_width=8, epochs=200, reg_epochs=30, learning_rate=1e-3)
    base.update(overrides)
    return ExperimentConfig(**base)
