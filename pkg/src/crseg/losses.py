"""Training objectives: Dice + cross-entropy, spatial and temporal consistency.

All tensor functions take batched ``B x C x H x W x D`` logits and
``B x H x W x D`` integer labels; single LogitMap/LabelMap values are accepted
too and promoted to a batch of one.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from .transforms import apply_geometric_to_logits, apply_to_image, validity_mask
from .volume import LabelMap, LogitMap
from .warp import warp

DICE_SMOOTH = 1.0


def _logits(z) -> torch.Tensor:
    if isinstance(z, LogitMap):
        return torch.from_numpy(np.array(z.data))[None]
    return torch.as_tensor(z)


def _labels(y) -> torch.Tensor:
    if isinstance(y, LabelMap):
        return torch.from_numpy(y.data.astype(np.int64))[None]
    return torch.as_tensor(y).long()


def _check_shapes(z, y):
    if z.shape[0] != y.shape[0] or z.shape[2:] != y.shape[1:]:
        raise ValueError(f"logits {tuple(z.shape)} and labels {tuple(y.shape)} do not match")


def dice_loss(logits, y, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """1 - soft Dice of the foreground class, averaged over the batch."""
    z, y = _logits(logits), _labels(y)
    _check_shapes(z, y)
    p = torch.softmax(z, dim=1)[:, 1].flatten(1)
    g = (y == 1).to(p.dtype).flatten(1)
    dice = (2 * (p * g).sum(1) + smooth) / (p.sum(1) + g.sum(1) + smooth)
    return 1 - dice.mean()


def cross_entropy_loss(logits, y) -> torch.Tensor:
    z, y = _logits(logits), _labels(y)
    _check_shapes(z, y)
    return F.cross_entropy(z, y)


def supervised_loss(logits, y) -> torch.Tensor:
    return dice_loss(logits, y) + cross_entropy_loss(logits, y)


def l2_consistency(za, zb, mask=None) -> torch.Tensor:
    """Mean squared logit difference over valid voxels and all channels.

    ``mask`` is boolean with the spatial (and optional batch) shape of the logits.
    """
    za, zb = _logits(za), _logits(zb)
    if za.shape != zb.shape:
        raise ValueError(f"logit shapes differ: {tuple(za.shape)} vs {tuple(zb.shape)}")
    sq = (za - zb).pow(2)
    if mask is None:
        return sq.mean()
    mask = torch.as_tensor(mask)
    while mask.dim() < sq.dim() - 1:
        mask = mask.unsqueeze(0)
    mask = mask.unsqueeze(1).expand_as(sq)
    n = mask.sum()
    if n == 0:
        raise ValueError("consistency mask selects no voxels")
    return sq[mask].sum() / n


def _branch(net, x, track_grad: bool):
    if track_grad:
        return net(x)
    with torch.no_grad():
        return net(x)


def spatial_consistency_loss(student, reference, x, transforms) -> torch.Tensor:
    """``l(T o reference(x), student(T o x))`` with one transform per sample.

    If ``reference`` is not the student (teacher mode) its branch carries no
    gradient. Voxels zero-filled by a translation are excluded.
    """
    if not isinstance(transforms, (list, tuple)):
        transforms = [transforms] * x.shape[0]
    if len(transforms) != x.shape[0]:
        raise ValueError("need one transform per sample")
    xt = torch.stack([apply_to_image(t, xi) for t, xi in zip(transforms, x)])
    z_student = student(xt)
    z_ref = _branch(reference, x, reference is student)
    z_ref_t = torch.stack([apply_geometric_to_logits(t, zi) for t, zi in zip(transforms, z_ref)])
    mask = torch.stack([validity_mask(t, x.shape[-3:]) for t in transforms])
    return l2_consistency(z_ref_t, z_student, mask)


def temporal_consistency_loss(student, reference, reg_net, x, x_prime, subjects=None,
                              field=None) -> torch.Tensor:
    """``l(student(x), warp(reg_net(x, x'), reference(x')))``; ``x`` is the fixed frame.

    ``subjects`` optionally gives ``(ids_of_x, ids_of_x_prime)`` and must agree
    pairwise. The registration network never receives gradients.
    """
    if subjects is not None:
        a, b = subjects
        if list(a) != list(b):
            raise ValueError(f"temporal pairs must come from one subject, got {a} vs {b}")
    if field is None:
        with torch.no_grad():
            field = reg_net(x, x_prime)
    field = field.detach()
    z = student(x)
    z_ref = _branch(reference, x_prime, reference is student)
    z_warped, inside = warp(field, z_ref, "trilinear", return_mask=True)
    return l2_consistency(z, z_warped, inside)


def lambda_schedule(step: float, ramp_length: float, lambda0: float) -> float:
    """Gaussian ramp-up ``lambda0 * exp(-5 (1 - S/L)^2)``, flat at ``lambda0`` after L."""
    if ramp_length <= 0:
        raise ValueError("ramp_length must be positive")
    if step > ramp_length:
        return float(lambda0)
    return float(lambda0) * math.exp(-5.0 * (1.0 - step / ramp_length) ** 2)


def mean_teacher_consistency(student, teacher, x) -> torch.Tensor:
    """Plain student/teacher agreement on the same un-augmented input."""
    return l2_consistency(student(x), _branch(teacher, x, teacher is student))


def combined_loss(batch, student, reference=None, reg_net=None, step: int = 0, ramp_length: float = 1.0,
                  lambda1: float = 0.0, lambda2: float = 0.0, spatial_scope: str = "all",
                  temporal: bool = True, consistency: str = "transform"):
    """Supervised loss plus scheduled consistency terms.

    ``batch`` provides ``x_l, y_l, x_u, x_p`` tensors and per-sample transforms
    ``t_l, t_u``. ``spatial_scope`` is ``"labeled"`` or ``"all"``;
    ``consistency="mean_teacher"`` replaces the transformed term by plain
    student/teacher agreement. A term whose scheduled weight is zero is not
    evaluated. Returns ``(total, breakdown)``.
    """
    reference = student if reference is None else reference
    lam1 = lambda_schedule(step, ramp_length, lambda1)
    lam2 = lambda_schedule(step, ramp_length, lambda2) if temporal else 0.0
    l_sup = supervised_loss(student(batch.x_l), batch.y_l)
    total = l_sup
    l_s = l_t = torch.zeros((), dtype=l_sup.dtype)
    has_u = batch.x_u is not None and len(batch.x_u) > 0
    if lam1 > 0 and spatial_scope is not None:
        if spatial_scope == "all" and has_u:
            x_all = torch.cat([batch.x_l, batch.x_u])
            t_all = list(batch.t_l) + list(batch.t_u)
        else:
            x_all, t_all = batch.x_l, list(batch.t_l)
        if consistency == "mean_teacher":
            l_s = mean_teacher_consistency(student, reference, x_all)
        else:
            l_s = spatial_consistency_loss(student, reference, x_all, t_all)
        total = total + lam1 * l_s
    if lam2 > 0 and has_u:
        field = getattr(batch, "field", None)
        if reg_net is None and field is None:
            raise ValueError("temporal consistency needs a registration network")
        l_t = temporal_consistency_loss(student, reference, reg_net, batch.x_u, batch.x_p,
                                        subjects=(batch.u_subjects, batch.p_subjects), field=field)
        total = total + lam2 * l_t
    breakdown = {"L_sup": l_sup.item(), "L_s": l_s.item(), "L_t": l_t.item(),
                 "lambda1": lam1, "lambda2": lam2, "total": total.item()}
    return total, breakdown
