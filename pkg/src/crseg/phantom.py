"""Synthetic 4D phantoms: a textured, breathing ellipsoid on a dark background.

Each subject has a flattened bright ellipsoid (the target structure), a second
dimmer elongated ellipsoid acting as a distractor, and a smooth background.
Frame ``t`` is rendered by evaluating the static scene at ``p + u(p, t)``,
where ``u`` mixes a global sinusoidal drift with a low-frequency local
pattern and never exceeds ``motion_amplitude`` voxels in norm. The ground
truth of every frame is the displaced ellipsoid mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .volume import LabelMap, TimeSeries, Volume3D, load_array, minmax_normalize, save_array, save_series


@dataclass(frozen=True)
class PhantomConfig:
    grid_size: tuple[int, int, int] = (32, 32, 32)
    num_frames: int = 30
    num_subjects: int = 10
    label_fraction: float = 0.1
    motion_amplitude: float = 2.0
    noise_sigma: float = 0.03
    seed: int = 0
    spacing: tuple[float, float, float] = (3.0, 3.0, 3.0)

    def __post_init__(self):
        if len(self.grid_size) != 3 or min(self.grid_size) < 8:
            raise ValueError(f"grid dims must be >= 8, got {self.grid_size}")
        if self.num_frames < 2:
            raise ValueError("num_frames must be >= 2")
        if not 0 < self.label_fraction <= 1:
            raise ValueError("label_fraction must be in (0, 1]")
        if self.motion_amplitude < 0:
            raise ValueError("motion_amplitude must be >= 0")


@dataclass(frozen=True, eq=False)
class PhantomSubject:
    series: TimeSeries
    truth: np.ndarray  # N x H x W x D uint8, dense ground truth for every frame

    @property
    def subject_id(self) -> str:
        return self.series.subject_id


def subject_id(index: int) -> str:
    return f"phantom-{index:03d}"


def _band_noise(rng, shape, sigma):
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return n / (n.std() + 1e-12)


class _Scene:
    """Static scene and motion parameters of one subject."""

    def __init__(self, config: PhantomConfig, index: int):
        rng = np.random.default_rng([config.seed, index])
        shape = np.array(config.grid_size, dtype=float)
        s = shape.min()
        self.shape = tuple(config.grid_size)
        self.center = shape / 2 - 0.5 + rng.uniform(-0.1, 0.1, 3) * shape
        self.axes = np.array([0.32, 0.24, 0.14]) * s * rng.uniform(0.85, 1.15, 3)
        self.rot = Rotation.random(random_state=rng).as_matrix()
        # distractor on the opposite side of the grid center
        self.d_center = shape - 1 - self.center + rng.uniform(-0.05, 0.05, 3) * shape
        self.d_axes = np.array([0.34, 0.07, 0.07]) * s
        self.d_rot = Rotation.random(random_state=rng).as_matrix()
        self.texture = _band_noise(rng, self.shape, 1.2)
        self.background = _band_noise(rng, self.shape, 3.0)
        # motion
        self.drift_dir = rng.standard_normal(3)
        self.drift_dir /= np.linalg.norm(self.drift_dir)
        self.periods = rng.uniform(15.0, 25.0, 2)
        self.phases = rng.uniform(0.0, 2 * np.pi, 2)
        self.wave = rng.integers(-1, 2, size=(3, 3))
        self.wave_phase = rng.uniform(0.0, 2 * np.pi, 3)
        self.amplitude = config.motion_amplitude
        self.noise_sigma = config.noise_sigma
        self.noise_seed = int(rng.integers(0, 2**31 - 1))

    def displacement(self, t: int) -> np.ndarray:
        """``3 x H x W x D`` displacement (voxels) of frame ``t``."""
        grid = np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in self.shape], indexing="ij"))
        if self.amplitude == 0:
            return np.zeros_like(grid)
        drift = math.sin(2 * np.pi * t / self.periods[0] + self.phases[0])
        local_amp = math.sin(2 * np.pi * t / self.periods[1] + self.phases[1])
        u = 0.7 * drift * self.drift_dir[:, None, None, None] * np.ones_like(grid)
        for i in range(3):
            arg = sum(2 * np.pi * self.wave[i, j] * grid[j] / self.shape[j] for j in range(3))
            u[i] += 0.3 * local_amp * np.cos(arg + self.wave_phase[i]) / math.sqrt(3)
        return self.amplitude * u

    def _radius(self, q, center, axes, rot):
        d = np.tensordot(rot.T, q - center[:, None, None, None], axes=1)
        return np.sqrt(sum((d[i] / axes[i]) ** 2 for i in range(3)))

    def render(self, t: int, noise_rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        grid = np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in self.shape], indexing="ij"))
        q = grid + self.displacement(t)
        r = self._radius(q, self.center, self.axes, self.rot)
        rd = self._radius(q, self.d_center, self.d_axes, self.d_rot)
        soft = 1 / (1 + np.exp(-(1 - r) * self.axes.min() / 0.5))
        soft_d = 1 / (1 + np.exp(-(1 - rd) * self.d_axes.min() / 0.5)) * (1 - soft)
        tex = ndimage.map_coordinates(self.texture, q, order=1, mode="nearest")
        bg = ndimage.map_coordinates(self.background, q, order=1, mode="nearest")
        img = (0.15 + 0.04 * bg) * (1 - soft - soft_d) + (0.7 + 0.1 * tex) * soft + (0.42 + 0.05 * tex) * soft_d
        if self.noise_sigma > 0:
            img = img + noise_rng.normal(0.0, self.noise_sigma, img.shape)
        return minmax_normalize(img), (r <= 1).astype(np.uint8)


def generate_subject(config: PhantomConfig, subject_index: int) -> PhantomSubject:
    """Deterministic function of ``(config, subject_index)``."""
    scene = _Scene(config, subject_index)
    noise_rng = np.random.default_rng(scene.noise_seed)
    frames, masks = [], []
    for t in range(config.num_frames):
        img, mask = scene.render(t, noise_rng)
        frames.append(Volume3D(img, config.spacing))
        masks.append(mask)
    truth = np.stack(masks)
    n_labeled = max(1, int(round(config.label_fraction * config.num_frames)))
    pick_rng = np.random.default_rng([config.seed, subject_index, 1])
    labeled = sorted(pick_rng.choice(config.num_frames, size=n_labeled, replace=False).tolist())
    labels = {t: LabelMap(truth[t]) for t in labeled}
    truth.setflags(write=False)
    return PhantomSubject(TimeSeries(subject_id(subject_index), tuple(frames), labels), truth)


def generate_cohort(config: PhantomConfig) -> list[PhantomSubject]:
    return [generate_subject(config, i) for i in range(config.num_subjects)]


def motion_field(config: PhantomConfig, subject_index: int, t: int) -> np.ndarray:
    """The displacement used to render frame ``t`` of a subject."""
    return _Scene(config, subject_index).displacement(t)


def truth_dir(out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    return out_dir.parent / (out_dir.name + "_gt")


def write_cohort(subjects: list[PhantomSubject], out_dir: str | Path) -> Path:
    """Write series in the on-disk layout and dense ground truth to ``<out_dir>_gt``."""
    out_dir = Path(out_dir)
    gt_root = truth_dir(out_dir)
    for subj in subjects:
        save_series(subj.series, out_dir / subj.subject_id)
        gdir = gt_root / subj.subject_id
        gdir.mkdir(parents=True, exist_ok=True)
        for t, mask in enumerate(subj.truth):
            save_array(gdir / f"gt_{t:03d}.raw", mask, subj.series.spacing)
    return out_dir


def load_truth(gt_root: str | Path, subject: str) -> np.ndarray:
    files = sorted((Path(gt_root) / subject).glob("gt_*.raw"))
    if not files:
        raise FileNotFoundError(f"no dense ground truth for {subject} in {gt_root}")
    return np.stack([load_array(f)[0] for f in files])
