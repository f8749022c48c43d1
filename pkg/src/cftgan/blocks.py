"""Shared conv blocks, size planning, and mask compositing.

Up-sampling blocks are nearest-neighbor up-sampling followed by a 4x4(x4)
stride-2 convolution (net x2 per doubling axis); down-sampling blocks are
the stride-2 convolution alone. Axes that have already collapsed to size
1 switch to a size-preserving 3-kernel stride-1 convolution so the same
four-block towers work at both paper and toy geometry.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import prod

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeMismatch


def _schedule(size: int, steps: int) -> tuple[int, ...]:
    """Sizes from the seed up to ``size`` over ``steps`` doublings."""
    sizes = [size]
    for _ in range(steps):
        cur = sizes[0]
        if cur == 1:
            sizes.insert(0, 1)
        elif cur % 2 == 0:
            sizes.insert(0, cur // 2)
        else:
            raise ShapeMismatch(f"axis size {size} not reachable by {steps} doublings")
    return tuple(sizes)


@dataclass(frozen=True)
class VolumePlan:
    """Per-axis size ladder for a tower of ``steps`` up/down blocks."""

    axes: tuple[tuple[int, ...], ...]  # one ladder per axis, seed first

    @property
    def steps(self) -> int:
        return len(self.axes[0]) - 1

    def seed_shape(self) -> tuple[int, ...]:
        return tuple(ladder[0] for ladder in self.axes)

    def shape_at(self, i: int) -> tuple[int, ...]:
        return tuple(ladder[i] for ladder in self.axes)

    def doubles(self, block: int) -> tuple[bool, ...]:
        """Which axes double in up-block ``block`` (1-based)."""
        return tuple(ladder[block] == 2 * ladder[block - 1] for ladder in self.axes)

    def enc_halves(self, block: int) -> tuple[bool, ...]:
        """Which axes halve in encoder block ``block`` (1-based, mirrored)."""
        return self.doubles(self.steps + 1 - block)

    def enc_shape_after(self, block: int) -> tuple[int, ...]:
        return self.shape_at(self.steps - block)


def plan_volume(frames: int, height: int, width: int, steps: int = 4) -> VolumePlan:
    return VolumePlan((_schedule(frames, steps), _schedule(height, steps),
                       _schedule(width, steps)))


def plan_plane(height: int, width: int, steps: int = 4) -> VolumePlan:
    return VolumePlan((_schedule(height, steps), _schedule(width, steps)))


def _conv_args(resizing: tuple[bool, ...]):
    kernel = tuple(4 if r else 3 for r in resizing)
    stride = tuple(2 if r else 1 for r in resizing)
    padding = tuple(1 for _ in resizing)
    return kernel, stride, padding


def upsample_nearest(x: torch.Tensor, doubles: tuple[bool, ...]) -> torch.Tensor:
    scale = tuple(4.0 if d else 1.0 for d in doubles)
    return F.interpolate(x, scale_factor=scale, mode="nearest")


def head_conv(in_ch: int, out_ch: int, doubles: tuple[bool, ...]) -> nn.Module:
    """Final-layer convolution matching an up-block's geometry (has bias)."""
    kernel, stride, padding = _conv_args(doubles)
    conv = nn.Conv3d if len(doubles) == 3 else nn.Conv2d
    return conv(in_ch, out_ch, kernel, stride, padding)


class UpBlock(nn.Module):
    """Nearest-neighbor up-sampling then stride-2 conv, BN, ReLU."""

    def __init__(self, in_ch: int, out_ch: int, doubles: tuple[bool, ...]):
        super().__init__()
        self.doubles = doubles
        kernel, stride, padding = _conv_args(doubles)
        if len(doubles) == 3:
            self.conv = nn.Conv3d(in_ch, out_ch, kernel, stride, padding, bias=False)
            self.bn = nn.BatchNorm3d(out_ch)
        else:
            self.conv = nn.Conv2d(in_ch, out_ch, kernel, stride, padding, bias=False)
            self.bn = nn.BatchNorm2d(out_ch)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.bn(self.conv(upsample_nearest(x, self.doubles))))


class DownBlock(nn.Module):
    """Stride-2 conv then LeakyReLU; batch-norm on all but the first layer."""

    def __init__(self, in_ch: int, out_ch: int, halves: tuple[bool, ...],
                 batch_norm: bool = True):
        super().__init__()
        kernel, stride, padding = _conv_args(halves)
        conv = nn.Conv3d if len(halves) == 3 else nn.Conv2d
        self.conv = conv(in_ch, out_ch, kernel, stride, padding, bias=not batch_norm)
        if batch_norm:
            self.bn = nn.BatchNorm3d(out_ch) if len(halves) == 3 else nn.BatchNorm2d(out_ch)
        else:
            self.bn = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv(x)
        if self.bn is not None:
            h = self.bn(h)
        return F.leaky_relu(h, 0.2)


class BackgroundGenerator(nn.Module):
    """Static background image from (z, c), replicated over time later."""

    def __init__(self, in_dim: int, widths: tuple[int, ...], height: int,
                 width: int, out_ch: int = 3):
        super().__init__()
        plan = plan_plane(height, width, steps=4)
        w0, w1, w2, w3 = widths
        self.seed_shape = (w0, *plan.seed_shape())
        # bias-free: see the generator seed layers
        self.fc = nn.Linear(in_dim, prod(self.seed_shape), bias=False)
        self.blocks = nn.ModuleList([
            UpBlock(w0, w1, plan.doubles(1)),
            UpBlock(w1, w2, plan.doubles(2)),
            UpBlock(w2, w3, plan.doubles(3)),
        ])
        self.final_doubles = plan.doubles(4)
        self.head = head_conv(w3, out_ch, self.final_doubles)

    def forward(self, z: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        # leaky activation: the seed grid can be a single position, where a
        # fully dead ReLU unit would never receive gradient
        h = F.leaky_relu(self.fc(torch.cat([z, c], dim=1)), 0.2)
        h = h.view(-1, *self.seed_shape)
        for block in self.blocks:
            h = block(h)
        h = upsample_nearest(h, self.final_doubles)
        return torch.tanh(self.head(h))


def composite(mask: torch.Tensor, foreground: torch.Tensor,
              background: torch.Tensor | None = None) -> torch.Tensor:
    """Blend foreground over background with a soft [0, 1] mask.

    With no background the background is an implicit zero volume, so the
    result is exactly zero wherever the mask is zero.
    """
    if background is None:
        return mask * foreground
    return mask * foreground + (1.0 - mask) * background


def frames_identical(volume: torch.Tensor) -> bool:
    """True iff every frame along the time axis is bitwise identical."""
    first = volume.select(2, 0).unsqueeze(2)
    return bool(torch.equal(volume, first.expand_as(volume)))


def replicate_over_time(image: torch.Tensor, frames: int) -> torch.Tensor:
    """Expand a [B, C, H, W] image to a [B, C, T, H, W] static volume."""
    return image.unsqueeze(2).expand(-1, -1, frames, -1, -1)


def init_weights(module: nn.Module) -> None:
    """DCGAN-style init: conv/linear N(0, 0.02), norm gains N(1, 0.02)."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm3d)):
            nn.init.normal_(m.weight, 1.0, 0.02)
            nn.init.zeros_(m.bias)


def check_volume(x: torch.Tensor, channels: int, frames: int, height: int,
                 width: int, name: str) -> None:
    expected = (channels, frames, height, width)
    if tuple(x.shape[1:]) != expected:
        raise ShapeMismatch(f"{name}: expected [B, {', '.join(map(str, expected))}], "
                            f"got {tuple(x.shape)}")


def check_vector(x: torch.Tensor, dim: int, name: str) -> None:
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeMismatch(f"{name}: expected [B, {dim}], got {tuple(x.shape)}")
