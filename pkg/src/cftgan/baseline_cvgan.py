"""Single-stage caption-conditioned video GAN baseline.

One generator maps concat(z, c) straight to a video: a 3-D foreground
stream with a mask head, plus the same static-background stream the
texture stage uses, blended by the mask. The discriminator mirrors the
flow-stage conditioning on RGB input.
"""
from __future__ import annotations

from math import prod
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .blocks import (
    BackgroundGenerator,
    UpBlock,
    check_vector,
    composite,
    head_conv,
    init_weights,
    plan_volume,
    replicate_over_time,
    upsample_nearest,
)
from .flow_gan import FlowDiscriminator


class CvganGenOut(NamedTuple):
    video: torch.Tensor
    mask: torch.Tensor
    foreground: torch.Tensor
    background: torch.Tensor


class CvganGenerator(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        plan = plan_volume(cfg.frames, cfg.height, cfg.width, steps=4)
        w0, w1, w2, w3 = cfg.widths
        self.seed_shape = (w0, *plan.seed_shape())
        self.fc = nn.Linear(cfg.noise_dim + cfg.cond_dim, prod(self.seed_shape),
                            bias=False)
        self.blocks = nn.ModuleList([
            UpBlock(w0, w1, plan.doubles(1)),
            UpBlock(w1, w2, plan.doubles(2)),
            UpBlock(w2, w3, plan.doubles(3)),
        ])
        self.final_doubles = plan.doubles(4)
        self.head_fg = head_conv(w3, 3, self.final_doubles)
        self.head_mask = head_conv(w3, 1, self.final_doubles)
        self.background = BackgroundGenerator(cfg.noise_dim + cfg.cond_dim,
                                              cfg.widths, cfg.height, cfg.width)
        init_weights(self)

    def forward(self, z: torch.Tensor, c: torch.Tensor) -> CvganGenOut:
        check_vector(z, self.cfg.noise_dim, "z")
        check_vector(c, self.cfg.cond_dim, "c")
        h = F.leaky_relu(self.fc(torch.cat([z, c], dim=1)), 0.2).view(-1, *self.seed_shape)
        for block in self.blocks:
            h = block(h)
        h = upsample_nearest(h, self.final_doubles)
        foreground = torch.tanh(self.head_fg(h))
        mask = torch.sigmoid(self.head_mask(h))
        background = replicate_over_time(self.background(z, c), self.cfg.frames)
        return CvganGenOut(composite(mask, foreground, background), mask,
                           foreground, background)


class CvganDiscriminator(FlowDiscriminator):
    def __init__(self, cfg):
        super().__init__(cfg, in_channels=3)


def generate_cvgan(z: torch.Tensor, c: torch.Tensor,
                   params: CvganGenerator) -> torch.Tensor:
    return params(z, c).video


def discriminate_cvgan(video: torch.Tensor, phi: torch.Tensor,
                       params: CvganDiscriminator) -> torch.Tensor:
    return params(video, phi)
