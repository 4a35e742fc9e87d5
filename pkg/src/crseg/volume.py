"""Volumes, label maps, logit maps and subject time series.

On-disk layout of one subject::

    <dir>/manifest.json        {"subject_id", "frames": [...], "labels": {t: file}}
    <dir>/frame_000.raw        little-endian array bytes
    <dir>/frame_000.json       {"shape": [H, W, D], "spacing": [sx, sy, sz], "dtype": "<f4"}
    <dir>/label_003.raw, label_003.json

Displacement fields use the same raw + JSON pair with shape ``[3, H, W, D]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

MANIFEST = "manifest.json"


class ValidationError(ValueError):
    """A volume, label map or series violates its invariants."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Volume3D:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValidationError(f"volume must be 3D with non-empty axes, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("volume contains non-finite intensities")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValidationError(f"spacing must be three positive numbers, got {self.spacing}")
        object.__setattr__(self, "data", _frozen(data.astype(np.float32, copy=False)))
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class LabelMap:
    data: np.ndarray
    num_classes: int = 2

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValidationError(f"label map must be 3D, got {data.shape}")
        if not np.issubdtype(data.dtype, np.integer) and not np.issubdtype(data.dtype, np.bool_):
            if not np.all(data == np.round(data)):
                raise ValidationError("label map must hold integers")
        data = data.astype(np.uint8)
        if data.size and int(data.max()) >= self.num_classes:
            raise ValidationError(f"label value {int(data.max())} >= num_classes={self.num_classes}")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class LogitMap:
    """Pre-softmax class scores of shape ``C x H x W x D``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 4:
            raise ValidationError(f"logit map must be C x H x W x D, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("logit map contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def num_classes(self) -> int:
        return self.data.shape[0]

    def softmax(self) -> np.ndarray:
        z = self.data.astype(np.float64)
        z = z - z.max(axis=0, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=0, keepdims=True)


@dataclass(frozen=True, eq=False)
class TimeSeries:
    subject_id: str
    frames: tuple[Volume3D, ...]
    labels: Mapping[int, LabelMap] = field(default_factory=dict)

    def __post_init__(self):
        frames = tuple(self.frames)
        if len(frames) < 2:
            raise ValidationError(f"{self.subject_id}: a time series needs at least 2 frames")
        shape, spacing = frames[0].shape, frames[0].spacing
        for t, f in enumerate(frames):
            if f.shape != shape:
                raise ValidationError(
                    f"{self.subject_id}: frame {t} has shape {f.shape}, expected {shape}")
            if f.spacing != spacing:
                raise ValidationError(f"{self.subject_id}: frame {t} spacing differs")
        labels = {int(t): lab for t, lab in sorted(self.labels.items())}
        for t, lab in labels.items():
            if not 0 <= t < len(frames):
                raise ValidationError(f"{self.subject_id}: label index {t} outside 0..{len(frames) - 1}")
            if lab.shape != shape:
                raise ValidationError(f"{self.subject_id}: label {t} shape {lab.shape} != {shape}")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frames[0].shape

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.frames[0].spacing

    @property
    def labeled_indices(self) -> list[int]:
        return list(self.labels)

    @property
    def unlabeled_indices(self) -> list[int]:
        return [t for t in range(len(self)) if t not in self.labels]

    def array(self) -> np.ndarray:
        """All frames stacked as ``N x H x W x D`` float32."""
        return np.stack([f.data for f in self.frames])


@dataclass(frozen=True)
class DatasetSplit:
    fold_id: int
    train_subjects: tuple[str, ...]
    val_subjects: tuple[str, ...]
    test_subjects: tuple[str, ...]

    def __post_init__(self):
        tr, va, te = set(self.train_subjects), set(self.val_subjects), set(self.test_subjects)
        if tr & va or tr & te or va & te:
            raise ValidationError(f"fold {self.fold_id}: subject sets overlap")


def minmax_normalize(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float32)
    lo, hi = a.min(), a.max()
    if hi <= lo:
        return np.zeros_like(a)
    return ((a - lo) / (hi - lo)).astype(np.float32)


# ---------------------------------------------------------------- raw I/O

def save_array(path: str | Path, data: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> Path:
    """Write ``data`` to ``path`` (``.raw``) plus a JSON sidecar header."""
    path = Path(path).with_suffix(".raw")
    data = np.asarray(data)
    dt = data.dtype.newbyteorder("<") if data.dtype.itemsize > 1 else data.dtype
    path.write_bytes(np.ascontiguousarray(data, dtype=dt).tobytes())
    header = {"shape": list(data.shape), "spacing": [float(s) for s in spacing], "dtype": dt.str}
    path.with_suffix(".json").write_text(json.dumps(header))
    return path


def load_array(path: str | Path) -> tuple[np.ndarray, tuple[float, ...]]:
    path = Path(path).with_suffix(".raw")
    if not path.exists():
        raise FileNotFoundError(f"missing volume file {path}")
    header = json.loads(path.with_suffix(".json").read_text())
    dtype = np.dtype(header.get("dtype", "<f4"))
    data = np.frombuffer(path.read_bytes(), dtype=dtype)
    n = math.prod(header["shape"])
    if data.size != n:
        raise ValidationError(f"{path.name}: {data.size} values, header says {n}")
    return data.reshape(header["shape"]).astype(dtype.newbyteorder("="), copy=True), tuple(header["spacing"])


def save_series(series: TimeSeries, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frames, labels = [], {}
    for t, frame in enumerate(series.frames):
        name = f"frame_{t:03d}.raw"
        save_array(directory / name, frame.data.astype(np.float32), frame.spacing)
        frames.append(name)
    for t, lab in series.labels.items():
        name = f"label_{t:03d}.raw"
        save_array(directory / name, lab.data, series.spacing)
        labels[str(t)] = name
    manifest = {"subject_id": series.subject_id, "frames": frames, "labels": labels}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return directory


def load_series(directory: str | Path, normalize: bool = True) -> TimeSeries:
    """Read one subject written by :func:`save_series`.

    With ``normalize`` each frame is min-max scaled to [0, 1]; data already in
    that range with min 0 and max 1 comes back bit-identical.
    """
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    frames = []
    for t, name in enumerate(manifest["frames"]):
        if not (directory / name).exists():
            raise FileNotFoundError(f"{directory}: frame {t} file {name!r} is missing")
        data, spacing = load_array(directory / name)
        if data.ndim != 3:
            raise ValidationError(f"{name}: expected a 3D volume, got shape {data.shape}")
        frames.append(Volume3D(minmax_normalize(data) if normalize else data, spacing))
    labels = {}
    for t, name in manifest.get("labels", {}).items():
        if not (directory / name).exists():
            raise FileNotFoundError(f"{directory}: label for frame {t} file {name!r} is missing")
        data, _ = load_array(directory / name)
        labels[int(t)] = LabelMap(data)
    return TimeSeries(manifest.get("subject_id", directory.name), tuple(frames), labels)


def load_cohort(root: str | Path, normalize: bool = True) -> list[TimeSeries]:
    """Load every subject directory (one holding a manifest) below ``root``."""
    root = Path(root)
    dirs = sorted(p.parent for p in root.glob(f"*/{MANIFEST}"))
    if not dirs:
        raise FileNotFoundError(f"no subject manifests found under {root}")
    return [load_series(d, normalize) for d in dirs]


# ---------------------------------------------------------------- folds

def make_folds(subject_ids: Iterable[str], k: int = 5, seed: int = 0,
               val_fraction: float = 0.2) -> list[DatasetSplit]:
    """Subject-level k-fold split with a seeded validation carve-out per fold."""
    ids = list(subject_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("subject ids must be unique")
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > len(ids):
        raise ValueError(f"cannot make {k} folds from {len(ids)} subjects")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    chunks = np.array_split(np.arange(len(order)), k)
    splits = []
    for fold, chunk in enumerate(chunks):
        test = [order[i] for i in chunk]
        pool = [s for s in order if s not in set(test)]
        n_val = int(round(val_fraction * len(pool)))
        if val_fraction > 0 and len(pool) >= 2:
            n_val = min(max(n_val, 1), len(pool) - 1)
        fold_rng = np.random.default_rng([seed, fold])
        picked = set(fold_rng.choice(len(pool), size=n_val, replace=False).tolist()) if n_val else set()
        val = [s for i, s in enumerate(pool) if i in picked]
        train = [s for i, s in enumerate(pool) if i not in picked]
        splits.append(DatasetSplit(fold, tuple(sorted(train)), tuple(sorted(val)), tuple(sorted(test))))
    return splits


def subsample_split(split: DatasetSplit, n_subjects: int | None, seed: int = 0) -> DatasetSplit:
    """Keep ``n_subjects`` of the training + validation subjects; test set unchanged."""
    if n_subjects is None:
        return split
    pool = list(split.train_subjects) + list(split.val_subjects)
    if n_subjects >= len(pool):
        return split
    if n_subjects < 2:
        raise ValueError("need at least 2 subjects for training and validation")
    rng = np.random.default_rng([seed, split.fold_id, n_subjects])
    kept = [pool[i] for i in rng.choice(len(pool), size=n_subjects, replace=False)]
    frac = len(split.val_subjects) / len(pool)
    n_val = min(max(int(round(frac * n_subjects)), 1), n_subjects - 1)
    return DatasetSplit(split.fold_id, tuple(sorted(kept[n_val:])), tuple(sorted(kept[:n_val])),
                        split.test_subjects)


def logits_to_labels(logits: LogitMap | np.ndarray) -> LabelMap:
    """Per-voxel argmax over the class axis; ties go to the lower class index."""
    z = logits.data if isinstance(logits, LogitMap) else np.asarray(logits)
    return LabelMap(np.argmax(z, axis=0).astype(np.uint8), num_classes=z.shape[0])
