"""Two-branch multi-scale feature extraction.

The local branch is a residual conv encoder with a UNet decoder; the global
branch embeds the input into 4x4 patches and runs transformer stages with
spatial-reduction attention. Both decoders emit aligned pyramids at scales
{1, 1/2, 1/4, 1/8} with shared per-level channel widths, which the fusion
stage requires.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import ConvBlock, ResidualBlock, make_norm, upsample_to

PYRAMID_FACTORS = (1, 2, 4, 8)


class DecoderStep(nn.Module):
    """Upsample to the skip's size, concatenate, mix with 1x1 conv, refine."""

    def __init__(self, in_ch, skip_ch, out_ch):
        super().__init__()
        self.mix = nn.Conv2d(in_ch + skip_ch, out_ch, 1)
        self.refine = ConvBlock(out_ch, out_ch)

    def forward(self, x, skip):
        x = upsample_to(x, skip.shape[2:])
        return self.refine(self.mix(torch.cat([x, skip], dim=1)))


class LocalBranch(nn.Module):
    """Residual conv encoder over scales {1,...,1/16} plus a UNet decoder."""

    def __init__(
        self,
        in_channels: int = 32,
        stage_widths: tuple[int, ...] = (32, 48, 64, 96, 128),
        pyramid_widths: tuple[int, ...] = (32, 32, 48, 64),
    ):
        super().__init__()
        if len(stage_widths) != 5 or len(pyramid_widths) != 4:
            raise ValueError("expected 5 encoder stages and 4 pyramid levels")
        self.pyramid_widths = tuple(pyramid_widths)
        w = stage_widths
        self.stem = ResidualBlock(in_channels, w[0])
        self.stages = nn.ModuleList(
            nn.Sequential(
                ResidualBlock(w[i - 1], w[i], stride=2), ResidualBlock(w[i], w[i])
            )
            for i in range(1, 5)
        )
        self.decode = nn.ModuleList(
            [
                DecoderStep(w[4], w[3], pyramid_widths[3]),
                DecoderStep(pyramid_widths[3], w[2], pyramid_widths[2]),
                DecoderStep(pyramid_widths[2], w[1], pyramid_widths[1]),
                DecoderStep(pyramid_widths[1], w[0], pyramid_widths[0]),
            ]
        )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Return pyramid levels ordered fine to coarse: scales 1, 1/2, 1/4, 1/8."""
        e0 = self.stem(x)
        e1 = self.stages[0](e0)
        e2 = self.stages[1](e1)
        e3 = self.stages[2](e2)
        e4 = self.stages[3](e3)
        d3 = self.decode[0](e4, e3)
        d2 = self.decode[1](d3, e2)
        d1 = self.decode[2](d2, e1)
        d0 = self.decode[3](d1, e0)
        return [d0, d1, d2, d3]


class SpatialReductionAttention(nn.Module):
    """Multi-head self-attention with strided-conv key/value reduction.

    Set ``keep_attn`` to stash the last attention weights for inspection.
    """

    def __init__(self, dim, heads=1, sr_ratio=1):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.sr_ratio = sr_ratio
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, sr_ratio, stride=sr_ratio)
            self.sr_norm = nn.LayerNorm(dim)
        self.keep_attn = False
        self.last_attn = None

    def forward(self, x, height, width):
        b, n, c = x.shape
        q = self.q(x).reshape(b, n, self.heads, c // self.heads).transpose(1, 2)
        if self.sr_ratio > 1:
            grid = x.transpose(1, 2).reshape(b, c, height, width)
            pad_h = (-height) % self.sr_ratio
            pad_w = (-width) % self.sr_ratio
            if pad_h or pad_w:
                grid = F.pad(grid, (0, pad_w, 0, pad_h))
            reduced = self.sr(grid).flatten(2).transpose(1, 2)
            x = self.sr_norm(reduced)
        kv = self.kv(x).reshape(b, -1, 2, self.heads, c // self.heads)
        k, v = kv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        if self.keep_attn:
            self.last_attn = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class ConvMlp(nn.Module):
    """Token MLP with a depthwise conv in the middle.

    The conv carries positional information, so no fixed-size positional
    table is needed and any input size works.
    """

    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.dw = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, height, width):
        b, n, _ = x.shape
        x = self.fc1(x)
        grid = x.transpose(1, 2).reshape(b, -1, height, width)
        x = self.dw(grid).flatten(2).transpose(1, 2)
        return self.fc2(F.gelu(x))


class TransformerBlock(nn.Module):
    def __init__(self, dim, heads, sr_ratio, mlp_ratio=2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SpatialReductionAttention(dim, heads, sr_ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = ConvMlp(dim, int(dim * mlp_ratio))

    def forward(self, x, height, width):
        x = x + self.attn(self.norm1(x), height, width)
        x = x + self.mlp(self.norm2(x), height, width)
        return x


class TransformerStage(nn.Module):
    """A stack of attention blocks operating on one resolution."""

    def __init__(self, dim, depth, heads, sr_ratio, mlp_ratio=2):
        super().__init__()
        self.blocks = nn.ModuleList(
            TransformerBlock(dim, heads, sr_ratio, mlp_ratio) for _ in range(depth)
        )
        self.norm = nn.LayerNorm(dim)

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        b, c, h, w = grid.shape
        x = grid.flatten(2).transpose(1, 2)
        for block in self.blocks:
            x = block(x, h, w)
        x = self.norm(x)
        return x.transpose(1, 2).reshape(b, c, h, w)


class GlobalBranch(nn.Module):
    """Patch-embedding transformer encoder with a decoder back to full scale.

    The encoder runs at scales {1/4, 1/8, 1/16, 1/32}; the decoder bridges the
    missing 1/2 level with learned upsampling from 1/4 plus a strided skip
    taken from the full-resolution input feature.
    """

    def __init__(
        self,
        in_channels: int = 32,
        dims: tuple[int, ...] = (32, 48, 64, 96),
        depths: tuple[int, ...] = (1, 1, 2, 1),
        heads: tuple[int, ...] = (1, 2, 2, 4),
        sr_ratios: tuple[int, ...] = (4, 2, 2, 1),
        pyramid_widths: tuple[int, ...] = (32, 32, 48, 64),
        mlp_ratio: int = 2,
    ):
        super().__init__()
        if not (len(dims) == len(depths) == len(heads) == len(sr_ratios) == 4):
            raise ValueError("expected 4 transformer stages")
        self.pyramid_widths = tuple(pyramid_widths)
        self.patch_embed = nn.Sequential(
            nn.Conv2d(in_channels, dims[0], 7, stride=4, padding=3),
            make_norm(dims[0]),
        )
        self.stages = nn.ModuleList(
            TransformerStage(dims[i], depths[i], heads[i], sr_ratios[i], mlp_ratio)
            for i in range(4)
        )
        self.downsamples = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(dims[i], dims[i + 1], 3, stride=2, padding=1),
                make_norm(dims[i + 1]),
            )
            for i in range(3)
        )
        half_ch = pyramid_widths[1]
        self.half_skip = ConvBlock(in_channels, half_ch, stride=2)
        mid = pyramid_widths[3]
        self.decode_16 = DecoderStep(dims[3], dims[2], mid)
        self.decode = nn.ModuleList(
            [
                DecoderStep(mid, dims[1], pyramid_widths[3]),
                DecoderStep(pyramid_widths[3], dims[0], pyramid_widths[2]),
                DecoderStep(pyramid_widths[2], half_ch, pyramid_widths[1]),
                DecoderStep(pyramid_widths[1], in_channels, pyramid_widths[0]),
            ]
        )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Return pyramid levels ordered fine to coarse: scales 1, 1/2, 1/4, 1/8."""
        s0 = self.stages[0](self.patch_embed(x))
        s1 = self.stages[1](self.downsamples[0](s0))
        s2 = self.stages[2](self.downsamples[1](s1))
        s3 = self.stages[3](self.downsamples[2](s2))
        mid = self.decode_16(s3, s2)
        d3 = self.decode[0](mid, s1)
        d2 = self.decode[1](d3, s0)
        d1 = self.decode[2](d2, self.half_skip(x))
        d0 = self.decode[3](d1, x)
        return [d0, d1, d2, d3]


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
