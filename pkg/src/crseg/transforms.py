"""Random augmentation with paired image / logit application.

A :class:`PairedTransform` is applied in the fixed order
flip -> rotate -> translate -> gamma -> noise. Images get all five steps;
logit maps only the geometric ones, identically for every class channel.
With the default quarter-turn rotations and integer shifts no interpolation
is involved, so a model that is exactly equivariant gives identical outputs
on both branches.

Tensors are handled with the spatial axes last (``... x H x W x D``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .volume import LogitMap, Volume3D
from .warp import identity_grid, sample

AXIS_PAIRS = ((0, 1), (0, 2), (1, 2))


@dataclass(frozen=True)
class TransformConfig:
    p_flip: float = 0.5
    p_rotate: float = 0.5
    p_translate: float = 0.1
    max_translation: float = 5.0
    gamma_range: tuple[float, float] = (0.5, 2.0)
    noise_sigma_range: tuple[float, float] = (0.0, 0.1)
    continuous_rotation: bool = False
    max_angle_deg: float = 15.0


@dataclass(frozen=True)
class GeometricTransform:
    flip_axes: tuple[bool, bool, bool] = (False, False, False)
    # quarter turns per axis pair (0,1), (0,2), (1,2)
    rotation: tuple[int, int, int] = (0, 0, 0)
    translation: tuple[int, int, int] = (0, 0, 0)
    # small-angle rotation in degrees about each axis pair; continuous mode only
    angles: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if any(k not in (0, 1, 2, 3) for k in self.rotation):
            raise ValueError(f"quarter turns must be in 0..3, got {self.rotation}")

    @property
    def is_identity(self) -> bool:
        return (not any(self.flip_axes) and not any(self.rotation)
                and not any(self.translation) and not any(self.angles))


@dataclass(frozen=True)
class IntensityTransform:
    gamma: float = 1.0
    noise_sigma: float = 0.0
    noise_seed: int = 0


@dataclass(frozen=True)
class PairedTransform:
    geometric: GeometricTransform = field(default_factory=GeometricTransform)
    intensity: IntensityTransform = field(default_factory=IntensityTransform)

    def geometric_only(self) -> "PairedTransform":
        return replace(self, intensity=IntensityTransform())


def sample_transform(rng: np.random.Generator, shape=None,
                     config: TransformConfig = TransformConfig()) -> PairedTransform:
    """Draw one transform; ``shape`` restricts quarter turns on non-cubic grids.

    For an axis pair of unequal extent only half turns are drawn so the
    output keeps the input shape.
    """
    flips = tuple(bool(f) for f in rng.random(3) < config.p_flip)
    rotation, angles = (0, 0, 0), (0.0, 0.0, 0.0)
    rotate = rng.random() < config.p_rotate
    ks = rng.integers(0, 4, size=3)
    angle_draw = rng.uniform(-config.max_angle_deg, config.max_angle_deg, size=3)
    if rotate:
        if config.continuous_rotation:
            angles = tuple(float(a) for a in angle_draw)
        else:
            rot = []
            for (a, b), k in zip(AXIS_PAIRS, ks):
                if shape is not None and shape[a] != shape[b]:
                    k = 2 * (k % 2)
                rot.append(int(k))
            rotation = tuple(rot)
    translate = rng.random() < config.p_translate
    mags = rng.uniform(0.0, config.max_translation, size=3)
    signs = rng.choice((-1, 1), size=3)
    translation = tuple(int(s * round(m)) for s, m in zip(signs, mags)) if translate else (0, 0, 0)
    gamma = float(rng.uniform(*config.gamma_range))
    sigma = float(rng.uniform(*config.noise_sigma_range))
    seed = int(rng.integers(0, 2**31 - 1))
    return PairedTransform(GeometricTransform(flips, rotation, translation, angles),
                           IntensityTransform(gamma, sigma, seed))


def _shift(x: torch.Tensor, offsets) -> torch.Tensor:
    """Integer translation of the last three axes with zero fill: ``out[p] = x[p - s]``."""
    out = torch.zeros_like(x)
    src, dst = [Ellipsis], [Ellipsis]
    for s, n in zip(offsets, x.shape[-3:]):
        if abs(s) >= n:
            return out
        if s >= 0:
            src.append(slice(0, n - s))
            dst.append(slice(s, n))
        else:
            src.append(slice(-s, n))
            dst.append(slice(0, n + s))
    out[tuple(dst)] = x[tuple(src)]
    return out


def _rotation_matrix(angles_deg) -> np.ndarray:
    m = np.eye(3)
    for (a, b), ang in zip(AXIS_PAIRS, angles_deg):
        if ang:
            r = np.eye(3)
            c, s = math.cos(math.radians(ang)), math.sin(math.radians(ang))
            r[a, a], r[a, b], r[b, a], r[b, b] = c, -s, s, c
            m = r @ m
    return m


def _rotate_continuous(x: torch.Tensor, angles) -> torch.Tensor:
    shape = x.shape[-3:]
    lead = x.shape[:-3]
    v = x.reshape((1, -1) + tuple(shape))
    grid = identity_grid(shape, x.dtype, x.device)
    center = torch.tensor([(n - 1) / 2 for n in shape], dtype=x.dtype).view(3, 1, 1, 1)
    inv = torch.as_tensor(_rotation_matrix(angles).T, dtype=x.dtype)
    coords = torch.einsum("ij,j...->i...", inv, grid - center) + center
    out, _ = sample(v, coords.unsqueeze(0), "trilinear", "zeros")
    return out.reshape(lead + tuple(shape))


def apply_geometric(g: GeometricTransform, x: torch.Tensor) -> torch.Tensor:
    """Flip, rotate and translate the last three axes of ``x``."""
    nd = x.dim()
    for axis, f in enumerate(g.flip_axes):
        if f:
            x = torch.flip(x, dims=(nd - 3 + axis,))
    if any(g.angles):
        x = _rotate_continuous(x, g.angles)
    for (a, b), k in zip(AXIS_PAIRS, g.rotation):
        if k:
            x = torch.rot90(x, k, dims=(nd - 3 + a, nd - 3 + b))
    if any(g.translation):
        x = _shift(x, g.translation)
    return x


def validity_mask(t: PairedTransform | GeometricTransform, shape) -> torch.Tensor:
    """Boolean mask of voxels that received data (not zero fill) after the transform."""
    g = t.geometric if isinstance(t, PairedTransform) else t
    return apply_geometric(g, torch.ones(tuple(shape))) > 0.5


def apply_intensity(it: IntensityTransform, x: torch.Tensor) -> torch.Tensor:
    if it.gamma != 1.0:
        x = x.clamp(min=0).pow(it.gamma)
    if it.noise_sigma > 0:
        gen = torch.Generator().manual_seed(it.noise_seed)
        noise = torch.randn(x.shape, generator=gen, dtype=x.dtype)
        x = x + it.noise_sigma * noise
    return x


def _to_tensor(x):
    if isinstance(x, (Volume3D, LogitMap)):
        return torch.from_numpy(np.array(x.data))
    return torch.as_tensor(x)


def apply_to_image(t: PairedTransform, x):
    """Geometric then intensity part. Accepts a Volume3D or a tensor."""
    out = apply_intensity(t.intensity, apply_geometric(t.geometric, _to_tensor(x)))
    if isinstance(x, Volume3D):
        return Volume3D(out.numpy(), x.spacing)
    return out


def apply_geometric_to_logits(t: PairedTransform, z):
    """Geometric part only, identically for every channel (``C x H x W x D``)."""
    out = apply_geometric(t.geometric, _to_tensor(z))
    if isinstance(z, LogitMap):
        return LogitMap(out.numpy())
    return out
