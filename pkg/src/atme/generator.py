"""Denoising UNet generator conditioned on a scalar pseudo-time."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class GeneratorConfig:
    embed_dim: int = 64
    resolutions: Sequence[int] = (1, 2, 4, 8)
    in_channels: int = 3
    out_channels: int = 3
    # 1-based level indices; None means the two lowest-resolution levels
    attention_levels: Optional[Sequence[int]] = None
    time_embed_dim: int = 128

    def __post_init__(self):
        self.resolutions = tuple(int(r) for r in self.resolutions)
        if self.embed_dim < 1:
            raise ValueError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if not self.resolutions:
            raise ValueError("resolutions must be non-empty")
        if any(r < 1 for r in self.resolutions):
            raise ValueError(f"resolutions must be positive, got {self.resolutions}")
        if any(b < a for a, b in zip(self.resolutions, self.resolutions[1:])):
            raise ValueError(f"resolutions must be non-decreasing, got {self.resolutions}")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ValueError(f"time_embed_dim must be even, got {self.time_embed_dim}")
        depth = len(self.resolutions)
        if self.attention_levels is None:
            self.attention_levels = tuple(range(max(1, depth - 1), depth + 1))
        self.attention_levels = tuple(int(a) for a in self.attention_levels)
        bad = [a for a in self.attention_levels if not 1 <= a <= depth]
        if bad:
            raise ValueError(f"attention levels {bad} outside 1..{depth}")

    @property
    def depth(self) -> int:
        return len(self.resolutions)

    @property
    def encoder_widths(self) -> list[int]:
        return [self.embed_dim * r for r in self.resolutions]


def fourier_time_embed(t: torch.Tensor | float, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of ``t`` at geometrically spaced frequencies.

    Frequencies run from 1 down to ``1/max_period``; the first half of the
    output holds the sines, the second half the cosines. A scalar ``t`` gives
    a vector of length ``dim``; a length-B tensor gives ``(B, dim)``.
    """
    if dim % 2:
        raise ValueError(f"time embedding dim must be even, got {dim}")
    t = torch.as_tensor(t)
    if not t.is_floating_point():
        t = t.to(torch.get_default_dtype())
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = t[..., None] * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _groups(channels: int, max_groups: int = 8) -> int:
    for g in range(min(max_groups, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


class BasicBlock(nn.Module):
    """conv 3x3 -> group norm -> optional emb-driven affine -> SiLU."""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: Optional[int] = None):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False)
        self.norm = nn.GroupNorm(_groups(out_ch), out_ch, affine=False)
        self.affine = nn.Linear(emb_dim, 2 * out_ch) if emb_dim else None

    def forward(self, x: torch.Tensor, emb: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.norm(self.conv(x))
        if self.affine is not None and emb is not None:
            scale, shift = self.affine(emb)[:, :, None, None].chunk(2, dim=1)
            h = h * (1 + scale) + shift
        return F.silu(h)


class AttentionBlock(nn.Module):
    """Single-head spatial self-attention with a residual connection."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)
        self.last_weights: Optional[torch.Tensor] = None
        self.keep_weights = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        if self.keep_weights:
            self.last_weights = attn.detach()
        out = torch.einsum("bij,bcj->bci", attn, v).reshape(b, c, h, w)
        return x + self.proj(out)


class Head(nn.Module):
    """Output head: basic block, smoothing 3x3 conv to image channels, tanh."""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: Optional[int] = None):
        super().__init__()
        self.block = BasicBlock(in_ch, in_ch, emb_dim)
        self.smooth = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x: torch.Tensor, emb: Optional[torch.Tensor] = None) -> torch.Tensor:
        return torch.tanh(self.smooth(self.block(x, emb)))


class _Level(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, attention: bool):
        super().__init__()
        self.block1 = BasicBlock(in_ch, out_ch, emb_dim)
        self.block2 = BasicBlock(out_ch, out_ch, emb_dim)
        self.attn = AttentionBlock(out_ch) if attention else None

    def forward(self, x, emb):
        x = self.block2(self.block1(x, emb), emb)
        return self.attn(x) if self.attn is not None else x


class UNetGenerator(nn.Module):
    """UNet mapping a corrupted source image and its pseudo-time to a target image.

    Level ``i`` works at ``embed_dim * resolutions[i]`` channels; each encoder
    level is followed by a stride-2 convolution, each decoder level is
    preceded by nearest upsampling + convolution and a skip concatenation.
    """

    def __init__(self, config: Optional[GeneratorConfig] = None):
        super().__init__()
        self.config = cfg = config or GeneratorConfig()
        temb = cfg.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(temb, temb), nn.SiLU(), nn.Linear(temb, temb))
        widths = cfg.encoder_widths
        d = cfg.embed_dim

        self.stem = nn.Conv2d(cfg.in_channels, d, 3, padding=1)
        self.down_levels = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        prev = d
        for i, width in enumerate(widths, start=1):
            self.down_levels.append(_Level(prev, width, temb, i in cfg.attention_levels))
            self.downsamplers.append(nn.Conv2d(width, width, 3, stride=2, padding=1))
            prev = width

        self.mid1 = BasicBlock(prev, prev, temb)
        self.mid_attn = AttentionBlock(prev)
        self.mid2 = BasicBlock(prev, prev, temb)

        self.upsamplers = nn.ModuleList()
        self.up_levels = nn.ModuleList()
        for i in range(cfg.depth, 0, -1):
            width = widths[i - 1]
            self.upsamplers.append(nn.Conv2d(prev, prev, 3, padding=1))
            self.up_levels.append(_Level(prev + width, width, temb, i in cfg.attention_levels))
            prev = width

        self.head = Head(prev, cfg.out_channels, temb)

    @property
    def encoder_widths(self) -> list[int]:
        return self.config.encoder_widths

    def embed_time(self, t_tilde: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(fourier_time_embed(t_tilde, self.config.time_embed_dim))

    def forward(self, x: torch.Tensor, t_tilde: torch.Tensor | float,
                skip_mask: Optional[Sequence[bool]] = None) -> torch.Tensor:
        """``skip_mask[i]`` False zeroes the skip of encoder level ``i+1`` (wiring probe)."""
        factor = 2 ** self.config.depth
        if x.shape[-1] % factor or x.shape[-2] % factor:
            raise ValueError(
                f"input spatial size {tuple(x.shape[-2:])} not divisible by 2^{self.config.depth}"
            )
        if x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} input channels, got {x.shape[1]}")
        t_tilde = torch.as_tensor(t_tilde, dtype=x.dtype, device=x.device)
        if t_tilde.ndim == 0:
            t_tilde = t_tilde.expand(x.shape[0])
        emb = self.embed_time(t_tilde)

        h = self.stem(x)
        skips = []
        for level, down in zip(self.down_levels, self.downsamplers):
            h = level(h, emb)
            skips.append(h)
            h = down(h)

        h = self.mid2(self.mid_attn(self.mid1(h, emb)), emb)

        for j, (up, level) in enumerate(zip(self.upsamplers, self.up_levels)):
            idx = self.config.depth - 1 - j
            skip = skips[idx]
            if skip_mask is not None and not skip_mask[idx]:
                skip = torch.zeros_like(skip)
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = level(torch.cat([h, skip], dim=1), emb)

        return self.head(h, emb)
