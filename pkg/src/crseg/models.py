"""3D U-Nets for segmentation and registration, checkpoints, EMA teacher."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    out_channels: int = 2
    width: int = 16
    depth: int = 4
    zero_init_head: bool = False

    def __post_init__(self):
        if self.width < 1 or self.depth < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"invalid U-Net config {self}")


def conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, padding=1),
        nn.InstanceNorm3d(cout, affine=True),
        nn.LeakyReLU(0.01, inplace=True),
        nn.Conv3d(cout, cout, 3, padding=1),
        nn.InstanceNorm3d(cout, affine=True),
        nn.LeakyReLU(0.01, inplace=True),
    )


class UNet3D(nn.Module):
    """Encoder-decoder with skip connections, max-pool down, trilinear up.

    Inputs whose spatial size is not a multiple of ``2 ** (depth - 1)`` are
    zero-padded and the output cropped back.
    """

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        widths = [config.width * 2 ** i for i in range(config.depth)]
        self.encoders = nn.ModuleList()
        c = config.in_channels
        for w in widths:
            self.encoders.append(conv_block(c, w))
            c = w
        self.decoders = nn.ModuleList(
            conv_block(widths[i + 1] + widths[i], widths[i]) for i in reversed(range(config.depth - 1)))
        self.head = nn.Conv3d(widths[0], config.out_channels, 1)
        if config.zero_init_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)
        # channels-last 3D convolutions are markedly faster on CPU
        self.to(memory_format=torch.channels_last_3d)

    @property
    def factor(self) -> int:
        return 2 ** (self.config.depth - 1)

    def forward(self, x):
        size = x.shape[-3:]
        pad = [(-n) % self.factor for n in size]
        if any(pad):
            x = F.pad(x, [0, pad[2], 0, pad[1], 0, pad[0]])
        x = x.contiguous(memory_format=torch.channels_last_3d)
        skips = []
        for i, enc in enumerate(self.encoders):
            if i:
                x = F.max_pool3d(x, 2)
            x = enc(x)
            skips.append(x)
        skips.pop()
        for dec in self.decoders:
            skip = skips.pop()
            x = F.interpolate(x, size=skip.shape[-3:], mode="trilinear", align_corners=False)
            x = dec(torch.cat([x, skip], dim=1))
        x = self.head(x)
        if any(pad):
            x = x[..., :size[0], :size[1], :size[2]]
        return x.contiguous()


def init_segmentation(config: UNetConfig | None = None, seed: int = 0, **overrides) -> UNet3D:
    config = config or UNetConfig(**overrides)
    torch.manual_seed(seed)
    return UNet3D(config)


def init_registration(width: int = 16, depth: int = 4, seed: int = 0) -> UNet3D:
    """Two input channels (moving, fixed), three output channels, zero head.

    The zero-initialized head makes the untrained network predict the identity map.
    """
    torch.manual_seed(seed)
    return UNet3D(UNetConfig(2, 3, width, depth, zero_init_head=True))


def _check_finite(net: nn.Module):
    for name, p in net.named_parameters():
        if not torch.isfinite(p).all():
            raise FloatingPointError(f"parameter {name} is not finite")


def _as_input(x, dtype):
    from .volume import Volume3D

    if isinstance(x, Volume3D):
        x = np.array(x.data)
    x = torch.as_tensor(x, dtype=dtype)
    while x.dim() < 5:
        x = x.unsqueeze(0)
    return x


def forward_seg(net: UNet3D, x, check: bool = True):
    """Logits for a Volume3D (returns LogitMap) or a batched tensor (returns tensor)."""
    from .volume import LogitMap, Volume3D

    if check:
        _check_finite(net)
    dtype = next(net.parameters()).dtype
    if isinstance(x, Volume3D):
        with torch.no_grad():
            return LogitMap(net(_as_input(x, dtype))[0].float().numpy())
    return net(_as_input(x, dtype))


def forward_reg(net: UNet3D, fixed, moving, check: bool = True):
    """Displacement field taking ``moving`` onto ``fixed``.

    Volume3D inputs give a DisplacementField, tensors a ``B x 3 x H x W x D`` tensor.
    """
    from .volume import Volume3D
    from .warp import DisplacementField

    if check:
        _check_finite(net)
    dtype = next(net.parameters()).dtype
    as_value = isinstance(fixed, Volume3D)
    fixed, moving = _as_input(fixed, dtype), _as_input(moving, dtype)
    if fixed.shape != moving.shape:
        raise ValueError(f"fixed {tuple(fixed.shape)} and moving {tuple(moving.shape)} differ")
    if as_value:
        with torch.no_grad():
            return DisplacementField(net(torch.cat([moving, fixed], dim=1))[0].float().numpy())
    return net(torch.cat([moving, fixed], dim=1))


# ---------------------------------------------------------------- EMA teacher

@dataclass
class TeacherState:
    model: nn.Module
    alpha: float = 0.99

    @classmethod
    def from_student(cls, student: nn.Module, alpha: float = 0.99) -> "TeacherState":
        teacher = copy.deepcopy(student)
        for p in teacher.parameters():
            p.requires_grad_(False)
        return cls(teacher, alpha)


@torch.no_grad()
def ema_update(teacher: TeacherState, student: nn.Module) -> TeacherState:
    """``theta' <- alpha * theta' + (1 - alpha) * theta`` for every parameter and buffer."""
    a = teacher.alpha
    t_params = dict(teacher.model.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ValueError("teacher and student have different parameter sets")
    for name, tp in t_params.items():
        sp = s_params[name]
        if tp.shape != sp.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(tp.shape)} vs {tuple(sp.shape)}")
        if a == 1.0:
            continue
        if a == 0.0:
            tp.copy_(sp)
        else:
            tp.mul_(a).add_(sp, alpha=1.0 - a)
    for (name, tb), sb in zip(teacher.model.named_buffers(), student.buffers()):
        tb.copy_(sb)
    return teacher


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path: str | Path, net: UNet3D, kind: str = "segmentation", **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"version": CHECKPOINT_VERSION, "kind": kind, "arch": asdict(net.config),
               "state_dict": net.state_dict(), **extra}
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[UNet3D, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    net = UNet3D(UNetConfig(**payload["arch"]))
    net.load_state_dict(payload["state_dict"])
    net.eval()
    return net, payload
