"""Noise-prediction U-Net over the latent grid.

Four encoder and four decoder blocks around a bottleneck; the input latent
is conditioned by channel-concatenation, the fusion tokens by cross-attention
(8 heads x 64 features) in the last three encoder and first three decoder
blocks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class UnetConfig:
    latent_channels: int = 8
    channels: tuple = (24, 32, 48, 64)
    time_dim: int = 128
    ctx_dim: int = 128
    heads: int = 8
    head_dim: int = 64


def timestep_embedding(t: torch.Tensor, dim: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Sinusoidal embedding of integer diffusion steps."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / half)
    args = t.to(dtype).view(-1, 1) * freqs.view(1, -1)
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class ResBlockT(nn.Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time = nn.Linear(t_dim, c_out)
        self.norm2 = nn.GroupNorm(8, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, t_emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(t_emb).view(t_emb.shape[0], -1, 1, 1)
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Multi-head attention from feature-map positions to the fusion tokens."""

    def __init__(self, channels: int, ctx_dim: int, heads: int, head_dim: int):
        super().__init__()
        inner = heads * head_dim
        self.heads = heads
        self.norm = nn.GroupNorm(8, channels)
        self.to_q = nn.Conv2d(channels, inner, 1)
        self.to_k = nn.Linear(ctx_dim, inner)
        self.to_v = nn.Linear(ctx_dim, inner)
        self.to_out = nn.Conv2d(inner, channels, 1)

    def forward(self, x, ctx):
        b, _, h, w = x.shape
        q = self.to_q(self.norm(x)).reshape(b, self.heads, -1, h * w)
        k = self.to_k(ctx).reshape(b, ctx.shape[1], self.heads, -1)
        v = self.to_v(ctx).reshape(b, ctx.shape[1], self.heads, -1)
        q = q.permute(0, 1, 3, 2)                      # b, heads, hw, dim
        k = k.permute(0, 2, 1, 3)                      # b, heads, K, dim
        v = v.permute(0, 2, 1, 3)
        out = F.scaled_dot_product_attention(q, k, v)  # b, heads, hw, dim
        out = out.permute(0, 1, 3, 2).reshape(b, -1, h, w)
        return x + self.to_out(out)


class EpsPredictor(nn.Module):
    """Predicts the injected noise from (z_t, t, input latent, fusion tokens)."""

    def __init__(self, config: UnetConfig = UnetConfig()):
        super().__init__()
        self.config = config
        cs = config.channels
        td = config.time_dim * 2
        attn = lambda c: CrossAttention(c, config.ctx_dim, config.heads, config.head_dim)

        self.time_mlp = nn.Sequential(
            nn.Linear(config.time_dim, td), nn.SiLU(), nn.Linear(td, td)
        )
        self.conv_in = nn.Conv2d(2 * config.latent_channels, cs[0], 3, padding=1)

        self.enc_res = nn.ModuleList([
            ResBlockT(cs[0], cs[0], td),
            ResBlockT(cs[1], cs[1], td),
            ResBlockT(cs[2], cs[2], td),
            ResBlockT(cs[3], cs[3], td),
        ])
        # cross-attention in the last three encoder blocks
        self.enc_attn = nn.ModuleList([nn.Identity(), attn(cs[1]), attn(cs[2]), attn(cs[3])])
        self.downs = nn.ModuleList([
            nn.Conv2d(cs[0], cs[1], 3, stride=2, padding=1),
            nn.Conv2d(cs[1], cs[2], 3, stride=2, padding=1),
            nn.Conv2d(cs[2], cs[3], 3, stride=2, padding=1),
            nn.Conv2d(cs[3], cs[3], 3, stride=2, padding=1),
        ])

        self.mid1 = ResBlockT(cs[3], cs[3], td)
        self.mid2 = ResBlockT(cs[3], cs[3], td)

        self.ups = nn.ModuleList([
            nn.Conv2d(cs[3], cs[3], 3, padding=1),
            nn.Conv2d(cs[3], cs[2], 3, padding=1),
            nn.Conv2d(cs[2], cs[1], 3, padding=1),
            nn.Conv2d(cs[1], cs[0], 3, padding=1),
        ])
        self.dec_res = nn.ModuleList([
            ResBlockT(cs[3] + cs[3], cs[3], td),
            ResBlockT(cs[2] + cs[2], cs[2], td),
            ResBlockT(cs[1] + cs[1], cs[1], td),
            ResBlockT(cs[0] + cs[0], cs[0], td),
        ])
        # cross-attention in the first three decoder blocks
        self.dec_attn = nn.ModuleList([attn(cs[3]), attn(cs[2]), attn(cs[1]), nn.Identity()])

        self.norm_out = nn.GroupNorm(8, cs[0])
        self.conv_out = nn.Conv2d(cs[0], config.latent_channels, 3, padding=1)

    def forward(
        self,
        z_t: torch.Tensor,
        t: torch.Tensor,
        z_e: torch.Tensor,
        ctx: torch.Tensor,
    ) -> torch.Tensor:
        """z_t, z_e: (B, d, H, W); t: (B,) int steps; ctx: (B, K, L)."""
        if z_t.shape != z_e.shape:
            raise ValueError(f"z_t {tuple(z_t.shape)} != z_e {tuple(z_e.shape)}")
        t_emb = self.time_mlp(
            timestep_embedding(t, self.config.time_dim, dtype=self.conv_in.weight.dtype)
        )
        x = self.conv_in(torch.cat([z_t, z_e], dim=1))

        skips = []
        for i in range(4):
            x = self.enc_res[i](x, t_emb)
            if not isinstance(self.enc_attn[i], nn.Identity):
                x = self.enc_attn[i](x, ctx)
            skips.append(x)
            x = self.downs[i](x)

        x = self.mid1(x, t_emb)
        x = self.mid2(x, t_emb)

        for i in range(4):
            skip = skips[3 - i]
            x = self.ups[i](F.interpolate(x, size=skip.shape[-2:], mode="nearest"))
            x = self.dec_res[i](torch.cat([x, skip], dim=1), t_emb)
            if not isinstance(self.dec_attn[i], nn.Identity):
                x = self.dec_attn[i](x, ctx)

        return self.conv_out(F.silu(self.norm_out(x)))
