"""Displacement-field warping and the registration objective.

Tensors follow the ``B x C x H x W x D`` layout; a displacement field is
``B x 3 x H x W x D`` in voxel units and ``warp(field, v)(p) = v(p + field(p))``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

NCC_EPS = 1e-5


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel offsets (``3 x H x W x D``, voxel units) into the moving image."""

    data: np.ndarray

    def __post_init__(self):
        a = np.array(self.data, dtype=np.float32)
        if a.ndim != 4 or a.shape[0] != 3:
            raise ValueError(f"displacement field must be 3 x H x W x D, got {a.shape}")
        if not np.isfinite(a).all():
            raise ValueError("displacement field has non-finite values")
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])


def save_field(path: str | Path, field: DisplacementField) -> Path:
    from .volume import save_array

    return save_array(path, field.data)


def load_field(path: str | Path) -> DisplacementField:
    from .volume import load_array

    return DisplacementField(load_array(path)[0])


def _as_batched(v: torch.Tensor) -> torch.Tensor:
    while v.dim() < 5:
        v = v.unsqueeze(0)
    return v


def identity_grid(shape, dtype=torch.float32, device=None) -> torch.Tensor:
    """Voxel coordinates as a ``3 x H x W x D`` tensor."""
    axes = [torch.arange(n, dtype=dtype, device=device) for n in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"))


def sample(v: torch.Tensor, coords: torch.Tensor, interp: str = "trilinear",
           padding: str = "border") -> tuple[torch.Tensor, torch.Tensor]:
    """Sample ``v`` (B x C x H x W x D) at absolute voxel ``coords`` (B x 3 x ...).

    ``padding="border"`` clamps coordinates to the volume, ``"zeros"`` returns 0
    outside it. Also returns a ``B x ...`` mask of in-bounds sample positions.
    """
    if interp not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interp!r}")
    if padding not in ("border", "zeros"):
        raise ValueError(f"unknown padding {padding!r}")
    B, C = v.shape[:2]
    dims = v.shape[2:]
    out_shape = coords.shape[2:]
    inside = torch.ones((B,) + tuple(out_shape), dtype=torch.bool, device=v.device)
    for a, n in enumerate(dims):
        c = coords[:, a]
        inside &= (c >= 0) & (c <= n - 1)
    flat = v.reshape(B, C, -1)

    def gather(idx):  # idx: three B x ... integer tensors
        lin = (idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]
        lin = lin.reshape(B, 1, -1).expand(B, C, -1)
        return flat.gather(2, lin).reshape((B, C) + tuple(out_shape))

    clamped = [coords[:, a].clamp(0, n - 1) for a, n in enumerate(dims)]
    if interp == "nearest":
        out = gather([torch.round(c).long() for c in clamped])
    else:
        lo = [torch.floor(c).long() for c in clamped]
        hi = [(l + 1).clamp(max=n - 1) for l, n in zip(lo, dims)]
        w = [(c - l.to(c.dtype)).unsqueeze(1) for c, l in zip(clamped, lo)]
        out = 0
        for bits in range(8):
            corner, weight = [], 1
            for a in range(3):
                if bits >> (2 - a) & 1:
                    corner.append(hi[a])
                    weight = weight * w[a]
                else:
                    corner.append(lo[a])
                    weight = weight * (1 - w[a])
            out = out + gather(corner) * weight
    if padding == "zeros":
        out = out * inside.unsqueeze(1).to(out.dtype)
    return out, inside


def warp(field, v, interp: str = "trilinear", return_mask: bool = False):
    """Resample ``v`` through ``field``: ``out(p) = v(p + field(p))``.

    ``v`` may be a 3D volume, a ``C x H x W x D`` map or a batched 5D tensor;
    every channel is warped by the same field. Sampling positions outside the
    volume are clamped to the border; ``return_mask`` also gives the mask of
    voxels whose sample position was inside.
    """
    from .volume import LogitMap, Volume3D

    if isinstance(v, (Volume3D, LogitMap)):
        t = torch.from_numpy(np.array(v.data))
        fld = torch.as_tensor(np.array(field.data if hasattr(field, "data") else field))
        out = warp(fld.to(t.dtype), t, interp)
        return type(v)(out.numpy(), v.spacing) if isinstance(v, Volume3D) else LogitMap(out.numpy())

    if isinstance(field, DisplacementField):
        field = torch.from_numpy(np.array(field.data))
    field = torch.as_tensor(field)
    v = torch.as_tensor(v)
    spatial = v.shape[-3:]
    if field.shape[-4] != 3 or field.shape[-3:] != spatial:
        raise ValueError(f"field shape {tuple(field.shape)} does not match volume shape {tuple(v.shape)}")
    squeeze = v.dim()
    vb = _as_batched(v)
    fb = field if field.dim() == 5 else field.unsqueeze(0)
    if fb.shape[0] != vb.shape[0]:
        if fb.shape[0] == 1:
            fb = fb.expand(vb.shape[0], -1, -1, -1, -1)
        else:
            raise ValueError("field and volume batch sizes differ")
    coords = identity_grid(spatial, fb.dtype, fb.device).unsqueeze(0) + fb
    out, inside = sample(vb, coords, interp, "border")
    if squeeze == 3:
        out, inside = out[0, 0], inside[0]
    elif squeeze == 4:
        out, inside = out[0], inside[0]
    return (out, inside) if return_mask else out


def _box_sum(x: torch.Tensor, window) -> torch.Tensor:
    kernel = torch.ones((1, 1) + tuple(window), dtype=x.dtype, device=x.device)
    return F.conv3d(x, kernel, padding=tuple(w // 2 for w in window))


def local_ncc_map(a: torch.Tensor, b: torch.Tensor, window=(5, 5, 5), eps: float = NCC_EPS) -> torch.Tensor:
    """Per-voxel signed windowed NCC for ``B x 1 x H x W x D`` inputs.

    Windows are clipped at the border (sums over the in-volume part only).
    """
    if any(w % 2 == 0 for w in window):
        raise ValueError(f"window must be odd along every axis, got {window}")
    n = _box_sum(torch.ones_like(a[:1]), window)
    sa, sb = _box_sum(a, window), _box_sum(b, window)
    cross = _box_sum(a * b, window) - sa * sb / n
    var_a = _box_sum(a * a, window) - sa * sa / n
    var_b = _box_sum(b * b, window) - sb * sb / n
    return cross / torch.sqrt(var_a.clamp(min=0) * var_b.clamp(min=0) + eps)


def local_ncc(a, b, window=(5, 5, 5), eps: float = NCC_EPS):
    """Local normalized cross-correlation averaged over the volume (and batch)."""
    from .volume import Volume3D

    if isinstance(a, Volume3D) or isinstance(b, Volume3D):
        a = torch.from_numpy(np.array(a.data if isinstance(a, Volume3D) else a, dtype=np.float64))
        b = torch.from_numpy(np.array(b.data if isinstance(b, Volume3D) else b, dtype=np.float64))
        return float(local_ncc(a, b, window, eps))
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    a, b = _as_batched(a), _as_batched(b)
    return local_ncc_map(a, b, window, eps).mean()


def grad_smoothness(field) -> torch.Tensor:
    """Sum over axes of the mean squared forward difference of the field.

    Each per-axis term averages over voxels and the three components.
    """
    if not torch.is_tensor(field):
        field = torch.from_numpy(np.array(getattr(field, "data", field), dtype=np.float64))
    if field.dim() == 4:
        field = field.unsqueeze(0)
    total = field.new_zeros(())
    for axis in (2, 3, 4):
        if field.shape[axis] > 1:
            total = total + torch.diff(field, dim=axis).pow(2).mean()
    return total


def registration_loss(fixed, moving, field, lambda_reg: float = 1.0, window=(5, 5, 5)) -> torch.Tensor:
    """Negative local NCC of ``fixed`` vs warped ``moving`` plus a smoothness penalty."""
    fixed, moving, field = (torch.as_tensor(t) for t in (fixed, moving, field))
    moved = warp(field, moving, "trilinear")
    loss = -local_ncc(fixed, moved, window)
    if lambda_reg:
        loss = loss + lambda_reg * grad_smoothness(field)
    return loss
