"""Second-stage GAN: RGB video from (noise, caption condition, flow).

The foreground runs through a U-net over the flow volume with skip
connections, with the caption volume and a projected noise vector joined
at the bottleneck. A separate 2-D generator paints a static background
that is replicated over time, and a soft mask composites the two. The
discriminator sees the video, a two-block encoding of the flow (joined
after its second block), and the compressed caption embedding (joined
after its third block).
"""
from __future__ import annotations

from math import prod
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .blocks import (
    BackgroundGenerator,
    DownBlock,
    UpBlock,
    check_vector,
    check_volume,
    composite,
    frames_identical,
    head_conv,
    init_weights,
    plan_volume,
    replicate_over_time,
    upsample_nearest,
)


class TextureGenOut(NamedTuple):
    video: torch.Tensor       # [B, 3, T, H, W] in [-1, 1]
    mask: torch.Tensor        # [B, 1, T, H, W] in [0, 1]
    foreground: torch.Tensor  # [B, 3, T, H, W]
    background: torch.Tensor  # [B, 3, T, H, W], frame-wise static


class CaptionVolumeEncoder(nn.Module):
    """Expands the condition vector to the U-net bottleneck geometry."""

    def __init__(self, cond_dim: int, out_ch: int, mid_ch: int,
                 bottleneck: tuple[int, int, int]):
        super().__init__()
        plan = plan_volume(*bottleneck, steps=2)
        self.seed_shape = (mid_ch, *plan.seed_shape())
        self.fc = nn.Linear(cond_dim, prod(self.seed_shape), bias=False)
        self.blocks = nn.ModuleList([
            UpBlock(mid_ch, mid_ch, plan.doubles(1)),
            UpBlock(mid_ch, out_ch, plan.doubles(2)),
        ])

    def forward(self, c: torch.Tensor) -> torch.Tensor:
        h = F.leaky_relu(self.fc(c), 0.2).view(-1, *self.seed_shape)
        for block in self.blocks:
            h = block(h)
        return h


class TextureGenerator(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        plan = plan_volume(cfg.frames, cfg.height, cfg.width, steps=4)
        w0, w1, w2, w3 = cfg.widths
        cc = cfg.caption_channels

        self.e1 = DownBlock(2, w3, plan.enc_halves(1), batch_norm=False)
        self.e2 = DownBlock(w3, w2, plan.enc_halves(2))
        self.e3 = DownBlock(w2, w1, plan.enc_halves(3))
        self.e4 = DownBlock(w1, w0, plan.enc_halves(4))

        bottleneck = plan.seed_shape()
        self.caption_encoder = CaptionVolumeEncoder(cfg.cond_dim, cc, w1, bottleneck)
        self.z_shape = (cc, *bottleneck)
        self.z_proj = nn.Linear(cfg.noise_dim, prod(self.z_shape), bias=False)

        self.u1 = UpBlock(w0 + 2 * cc, w1, plan.doubles(1))
        self.u2 = UpBlock(w1 + w1, w2, plan.doubles(2))
        self.u3 = UpBlock(w2 + w2, w3, plan.doubles(3))
        self.final_doubles = plan.doubles(4)
        self.head_fg = head_conv(w3 + w3, 3, self.final_doubles)
        self.head_mask = head_conv(w3 + w3, 1, self.final_doubles)
        # identity taps on the encoder-to-decoder bypasses (hookable in tests)
        self.bypass1 = nn.Identity()
        self.bypass2 = nn.Identity()
        self.bypass3 = nn.Identity()

        self.background = BackgroundGenerator(cfg.noise_dim + cfg.cond_dim,
                                              cfg.widths, cfg.height, cfg.width)
        init_weights(self)

    def forward(self, z: torch.Tensor, c: torch.Tensor, flow: torch.Tensor,
                zero_caption_fg: bool = False,
                zero_caption_bg: bool = False) -> TextureGenOut:
        check_vector(z, self.cfg.noise_dim, "z")
        check_vector(c, self.cfg.cond_dim, "c")
        check_volume(flow, 2, self.cfg.frames, self.cfg.height, self.cfg.width, "flow")

        e1 = self.e1(flow)
        e2 = self.e2(e1)
        e3 = self.e3(e2)
        e4 = self.e4(e3)

        c_fg = torch.zeros_like(c) if zero_caption_fg else c
        cap = self.caption_encoder(c_fg)
        zv = F.leaky_relu(self.z_proj(z), 0.2).view(-1, *self.z_shape)

        h = self.u1(torch.cat([e4, cap, zv], dim=1))
        h = self.u2(torch.cat([h, self.bypass3(e3)], dim=1))
        h = self.u3(torch.cat([h, self.bypass2(e2)], dim=1))
        h = upsample_nearest(torch.cat([h, self.bypass1(e1)], dim=1),
                             self.final_doubles)
        foreground = torch.tanh(self.head_fg(h))
        mask = torch.sigmoid(self.head_mask(h))

        c_bg = torch.zeros_like(c) if zero_caption_bg else c
        background = replicate_over_time(self.background(z, c_bg), self.cfg.frames)
        return TextureGenOut(composite(mask, foreground, background), mask,
                             foreground, background)


class FlowFeatureEncoder(nn.Module):
    """Two down-sampling blocks turning flow into discriminator features."""

    def __init__(self, cfg):
        super().__init__()
        plan = plan_volume(cfg.frames, cfg.height, cfg.width, steps=4)
        _, _, w2, w3 = cfg.widths
        self.d1 = DownBlock(2, w3, plan.enc_halves(1), batch_norm=False)
        self.d2 = DownBlock(w3, w2, plan.enc_halves(2))

    def forward(self, flow: torch.Tensor) -> torch.Tensor:
        return self.d2(self.d1(flow))


class TextureDiscriminator(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        plan = plan_volume(cfg.frames, cfg.height, cfg.width, steps=4)
        w0, w1, w2, w3 = cfg.widths
        self.d1 = DownBlock(3, w3, plan.enc_halves(1), batch_norm=False)
        self.d2 = DownBlock(w3, w2, plan.enc_halves(2))
        self.flow_encoder = FlowFeatureEncoder(cfg)
        self.d3 = DownBlock(w2 + w2, w1, plan.enc_halves(3))
        self.compress = nn.Linear(cfg.embed_dim, cfg.caption_channels)
        self.d4 = DownBlock(w1 + cfg.caption_channels, w0, plan.enc_halves(4))
        self.fc = nn.Linear(w0 * prod(plan.seed_shape()), 1)
        init_weights(self)

    def logits(self, video: torch.Tensor, flow: torch.Tensor,
               phi: torch.Tensor) -> torch.Tensor:
        check_volume(video, 3, self.cfg.frames, self.cfg.height, self.cfg.width, "video")
        check_volume(flow, 2, self.cfg.frames, self.cfg.height, self.cfg.width, "flow")
        check_vector(phi, self.cfg.embed_dim, "phi")
        h = self.d2(self.d1(video))
        h = torch.cat([h, self.flow_encoder(flow)], dim=1)
        h = self.d3(h)
        cap = self.compress(phi).view(phi.shape[0], -1, 1, 1, 1)
        h = torch.cat([h, cap.expand(-1, -1, *h.shape[2:])], dim=1)
        h = self.d4(h)
        return self.fc(h.flatten(1)).squeeze(1)

    def forward(self, video: torch.Tensor, flow: torch.Tensor,
                phi: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(video, flow, phi))


def encode_caption_matrix(c: torch.Tensor, params: CaptionVolumeEncoder) -> torch.Tensor:
    return params(c)


def generate_video(z: torch.Tensor, c: torch.Tensor, flow: torch.Tensor,
                   params: TextureGenerator) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    out = params(z, c, flow)
    return out.video, out.mask, out.background


def discriminate_video(video: torch.Tensor, flow: torch.Tensor, phi: torch.Tensor,
                       params: TextureDiscriminator) -> torch.Tensor:
    return params(video, flow, phi)


def background_static_check(params: TextureGenerator, z: torch.Tensor,
                            c: torch.Tensor, flow: torch.Tensor) -> bool:
    """True iff every generated background frame is bitwise identical."""
    with torch.no_grad():
        out = params(z, c, flow)
    return frames_identical(out.background)
