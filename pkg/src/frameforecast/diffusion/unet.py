"""Conditional U-Net noise predictor.

The noisy latent and the conditioning image latent are concatenated on the channel axis;
instruction embeddings enter through cross-attention in spatial transformer blocks; the
timestep enters as a sinusoidal embedding added inside every residual block.

Parameter names follow the Stable Diffusion convention: ``attn1`` is self-attention,
``attn2`` is cross-attention. The PEFT mask relies on these names.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn


@dataclass
class DenoiserConfig:
    latent_channels: int = 4
    base_channels: int = 32
    channel_mult: Sequence[int] = (1, 2, 4, 4)
    num_res_blocks: int = 1
    attention_resolutions: Sequence[int] = (4, 2, 1)
    num_heads: int = 2
    transformer_depth: int = 1
    context_dim: int = 64
    norm_groups: int = 8

    def __post_init__(self):
        self.channel_mult = tuple(self.channel_mult)
        self.attention_resolutions = tuple(self.attention_resolutions)
        available = {2 ** i for i in range(len(self.channel_mult))}
        bad = set(self.attention_resolutions) - available
        if bad:
            raise ValueError(f"attention resolutions {sorted(bad)} not among the available "
                             f"downsample rates {sorted(available)}")
        for m in self.channel_mult:
            ch = self.base_channels * m
            if ch % self.num_heads or ch % self.norm_groups:
                raise ValueError(f"channel count {ch} must be divisible by num_heads "
                                 f"{self.num_heads} and norm_groups {self.norm_groups}")

    @property
    def in_channels(self) -> int:
        return 2 * self.latent_channels

    @property
    def out_channels(self) -> int:
        return self.latent_channels

    @property
    def spatial_divisor(self) -> int:
        return 2 ** (len(self.channel_mult) - 1)

    @classmethod
    def full_size(cls) -> "DenoiserConfig":
        """Full-size topology: 320 base channels, 8 heads."""
        return cls(base_channels=320, num_heads=8, num_res_blocks=2, context_dim=768,
                   norm_groups=32)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        d["attention_resolutions"] = list(self.attention_resolutions)
        return d


def timestep_embedding(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, context_dim: int | None = None):
        super().__init__()
        context_dim = context_dim or dim
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)
        self.keep_weights = False
        self.last_weights: Tensor | None = None

    def forward(self, x: Tensor, context: Tensor | None = None, mask: Tensor | None = None) -> Tensor:
        context = x if context is None else context
        b, n, d = x.shape
        h = self.heads
        q = self.to_q(x).reshape(b, n, h, d // h).transpose(1, 2)
        k = self.to_k(context).reshape(b, -1, h, d // h).transpose(1, 2)
        v = self.to_v(context).reshape(b, -1, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if mask is not None:
            scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        weights = scores.softmax(dim=-1)
        if self.keep_weights:
            self.last_weights = weights.detach()
        out = (weights @ v).transpose(1, 2).reshape(b, n, d)
        return self.to_out(out)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, context_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn1 = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.attn2 = Attention(dim, heads, context_dim)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x: Tensor, context: Tensor, mask: Tensor | None) -> Tensor:
        x = x + self.attn1(self.norm1(x))
        x = x + self.attn2(self.norm2(x), context, mask)
        return x + self.ff(self.norm3(x))


class SpatialTransformer(nn.Module):
    def __init__(self, ch: int, heads: int, depth: int, context_dim: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, ch)
        self.proj_in = nn.Conv2d(ch, ch, 1)
        self.blocks = nn.ModuleList(TransformerBlock(ch, heads, context_dim) for _ in range(depth))
        self.proj_out = nn.Conv2d(ch, ch, 1)

    def forward(self, x: Tensor, context: Tensor, mask: Tensor | None) -> Tensor:
        b, c, hh, ww = x.shape
        h = self.proj_in(self.norm(x)).flatten(2).transpose(1, 2)
        for blk in self.blocks:
            h = blk(h, context, mask)
        h = h.transpose(1, 2).reshape(b, c, hh, ww)
        return x + self.proj_out(h)


class Downsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class _Stage(nn.Module):
    """Residual block optionally followed by a spatial transformer."""

    def __init__(self, res: ResBlock, attn: SpatialTransformer | None):
        super().__init__()
        self.res = res
        self.attn = attn

    def forward(self, x, temb, context, mask):
        x = self.res(x, temb)
        return self.attn(x, context, mask) if self.attn is not None else x


class ConditionalUNet(nn.Module):
    def __init__(self, config: DenoiserConfig | None = None):
        super().__init__()
        self.config = cfg = config or DenoiserConfig()
        base = cfg.base_channels
        temb_dim = 4 * base
        g = cfg.norm_groups
        self.time_mlp = nn.Sequential(nn.Linear(base, temb_dim), nn.SiLU(),
                                      nn.Linear(temb_dim, temb_dim))

        def stage(cin, cout, ds):
            attn = (SpatialTransformer(cout, cfg.num_heads, cfg.transformer_depth,
                                       cfg.context_dim, g)
                    if ds in cfg.attention_resolutions else None)
            return _Stage(ResBlock(cin, cout, temb_dim, g), attn)

        self.conv_in = nn.Conv2d(cfg.in_channels, base, 3, padding=1)
        self.down = nn.ModuleList()
        skip_chs = [base]
        ch, ds = base, 1
        for level, mult in enumerate(cfg.channel_mult):
            for _ in range(cfg.num_res_blocks):
                self.down.append(stage(ch, base * mult, ds))
                ch = base * mult
                skip_chs.append(ch)
            if level != len(cfg.channel_mult) - 1:
                self.down.append(Downsample(ch))
                skip_chs.append(ch)
                ds *= 2

        self.mid_res1 = ResBlock(ch, ch, temb_dim, g)
        self.mid_attn = SpatialTransformer(ch, cfg.num_heads, cfg.transformer_depth,
                                           cfg.context_dim, g)
        self.mid_res2 = ResBlock(ch, ch, temb_dim, g)

        self.up = nn.ModuleList()
        for level, mult in reversed(list(enumerate(cfg.channel_mult))):
            for i in range(cfg.num_res_blocks + 1):
                self.up.append(stage(ch + skip_chs.pop(), base * mult, ds))
                ch = base * mult
                if level and i == cfg.num_res_blocks:
                    self.up.append(Upsample(ch))
                    ds //= 2

        self.norm_out = nn.GroupNorm(g, ch)
        self.conv_out = nn.Conv2d(ch, cfg.out_channels, 3, padding=1)

    def forward(self, z_noisy: Tensor, z_cond: Tensor, t: Tensor, context: Tensor,
                mask: Tensor | None = None) -> Tensor:
        """Predict the noise in ``z_noisy``.

        Args:
            z_noisy: (B, C, h, w) noisy target latent.
            z_cond: (B, C, h, w) latent of the conditioning (current) frame.
            t: (B,) integer timesteps.
            context: (B, L, D) instruction embeddings.
            mask: (B, L) bool, False at padding positions.
        """
        if z_noisy.shape != z_cond.shape:
            raise ValueError(f"noisy latent {tuple(z_noisy.shape)} and conditioning latent "
                             f"{tuple(z_cond.shape)} differ in shape")
        if z_noisy.shape[1] != self.config.latent_channels:
            raise ValueError(f"expected {self.config.latent_channels} latent channels, "
                             f"got {z_noisy.shape[1]}")
        div = self.config.spatial_divisor
        if z_noisy.shape[2] % div or z_noisy.shape[3] % div:
            raise ValueError(f"latent size {z_noisy.shape[2]}x{z_noisy.shape[3]} must be "
                             f"divisible by {div}")
        t = torch.as_tensor(t).reshape(-1).expand(z_noisy.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.config.base_channels).to(z_noisy.dtype))

        h = self.conv_in(torch.cat([z_noisy, z_cond], dim=1))
        skips = [h]
        for layer in self.down:
            h = layer(h) if isinstance(layer, Downsample) else layer(h, temb, context, mask)
            skips.append(h)
        h = self.mid_res1(h, temb)
        h = self.mid_attn(h, context, mask)
        h = self.mid_res2(h, temb)
        for layer in self.up:
            if isinstance(layer, Upsample):
                h = layer(h)
            else:
                h = layer(torch.cat([h, skips.pop()], dim=1), temb, context, mask)
        return self.conv_out(F.silu(self.norm_out(h)))
