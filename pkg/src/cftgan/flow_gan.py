"""First-stage GAN: optical flow volumes from (noise, caption condition).

The generator composites a foreground flow field against an implicit
zero background through a soft mask, so static regions carry exactly
zero motion. The discriminator is conditioned on the caption embedding,
compressed and tiled onto the feature map after its third block.
"""
from __future__ import annotations

from math import prod
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .blocks import (
    DownBlock,
    UpBlock,
    check_vector,
    check_volume,
    composite,
    head_conv,
    init_weights,
    plan_volume,
    upsample_nearest,
)


class FlowGenOut(NamedTuple):
    flow: torch.Tensor        # [B, 2, T, H, W], |values| <= flow_cap
    mask: torch.Tensor        # [B, 1, T, H, W] in [0, 1]
    foreground: torch.Tensor  # [B, 2, T, H, W]


class FlowGenerator(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.flow_cap = cfg.flow_cap
        plan = plan_volume(cfg.frames, cfg.height, cfg.width, steps=4)
        w0, w1, w2, w3 = cfg.widths
        self.seed_shape = (w0, *plan.seed_shape())
        # no bias: a 1x1x1 seed grid would make it a batch-uniform shift
        # that the first block's batch-norm cancels exactly
        self.fc = nn.Linear(cfg.noise_dim + cfg.cond_dim, prod(self.seed_shape),
                            bias=False)
        self.blocks = nn.ModuleList([
            UpBlock(w0, w1, plan.doubles(1)),
            UpBlock(w1, w2, plan.doubles(2)),
            UpBlock(w2, w3, plan.doubles(3)),
        ])
        self.final_doubles = plan.doubles(4)
        self.head_fg = head_conv(w3, 2, self.final_doubles)
        self.head_mask = head_conv(w3, 1, self.final_doubles)
        init_weights(self)

    def forward(self, z: torch.Tensor, c: torch.Tensor) -> FlowGenOut:
        check_vector(z, self.cfg.noise_dim, "z")
        check_vector(c, self.cfg.cond_dim, "c")
        h = F.leaky_relu(self.fc(torch.cat([z, c], dim=1)), 0.2).view(-1, *self.seed_shape)
        for block in self.blocks:
            h = block(h)
        h = upsample_nearest(h, self.final_doubles)
        foreground = torch.tanh(self.head_fg(h)) * self.flow_cap
        mask = torch.sigmoid(self.head_mask(h))
        return FlowGenOut(composite(mask, foreground), mask, foreground)


class FlowDiscriminator(nn.Module):
    """Caption-conditioned clip discriminator (also reused for RGB video)."""

    def __init__(self, cfg, in_channels: int = 2):
        super().__init__()
        self.cfg = cfg
        self.in_channels = in_channels
        plan = plan_volume(cfg.frames, cfg.height, cfg.width, steps=4)
        w0, w1, w2, w3 = cfg.widths
        self.d1 = DownBlock(in_channels, w3, plan.enc_halves(1), batch_norm=False)
        self.d2 = DownBlock(w3, w2, plan.enc_halves(2))
        self.d3 = DownBlock(w2, w1, plan.enc_halves(3))
        self.compress = nn.Linear(cfg.embed_dim, cfg.caption_channels)
        self.d4 = DownBlock(w1 + cfg.caption_channels, w0, plan.enc_halves(4))
        self.fc = nn.Linear(w0 * prod(plan.seed_shape()), 1)
        init_weights(self)

    def logits(self, clip: torch.Tensor, phi: torch.Tensor) -> torch.Tensor:
        check_volume(clip, self.in_channels, self.cfg.frames, self.cfg.height,
                     self.cfg.width, "clip")
        check_vector(phi, self.cfg.embed_dim, "phi")
        h = self.d3(self.d2(self.d1(clip)))
        cap = self.compress(phi).view(phi.shape[0], -1, 1, 1, 1)
        h = torch.cat([h, cap.expand(-1, -1, *h.shape[2:])], dim=1)
        h = self.d4(h)
        return self.fc(h.flatten(1)).squeeze(1)

    def forward(self, clip: torch.Tensor, phi: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(clip, phi))


def generate_flow(z: torch.Tensor, c: torch.Tensor,
                  params: FlowGenerator) -> tuple[torch.Tensor, torch.Tensor]:
    out = params(z, c)
    return out.flow, out.mask


def discriminate_flow(flow: torch.Tensor, phi: torch.Tensor,
                      params: FlowDiscriminator) -> torch.Tensor:
    return params(flow, phi)
