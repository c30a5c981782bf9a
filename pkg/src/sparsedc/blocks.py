"""Shared convolutional building blocks.

Normalization is group-based throughout: training runs at batch sizes of 1-2,
where batch statistics are useless.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

LEAKY_SLOPE = 0.2


def norm_groups(channels: int, preferred: int = 8) -> int:
    """Largest divisor of ``channels`` not above ``preferred``."""
    for g in range(min(preferred, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


def make_norm(channels: int) -> nn.Module:
    return nn.GroupNorm(norm_groups(channels), channels)


class ConvBlock(nn.Module):
    """3x3 conv + group norm + LeakyReLU."""

    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm = make_norm(out_ch)
        self.act = nn.LeakyReLU(LEAKY_SLOPE, inplace=True)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class ResidualBlock(nn.Module):
    """Two conv-norm-act layers with an additive skip."""

    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm1 = make_norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = make_norm(out_ch)
        self.act = nn.LeakyReLU(LEAKY_SLOPE, inplace=True)
        if stride != 1 or in_ch != out_ch:
            self.skip = nn.Conv2d(in_ch, out_ch, 1, stride=stride)
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        out = self.act(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return self.act(out + self.skip(x))


class ChannelAttention(nn.Module):
    """Squeeze-excitation: global average, bottleneck MLP, sigmoid rescale."""

    def __init__(self, channels, reduction=4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        squeeze = x.mean(dim=(2, 3))
        scale = torch.sigmoid(self.fc2(F.relu(self.fc1(squeeze))))
        return x * scale[:, :, None, None]


class GatedFuse(nn.Module):
    """Gated convolution with channel attention.

    feature = lrelu(conv_f(x)), gate = sigmoid(conv_g(x)); the product is
    rescaled per channel by squeeze-excitation. Gate values are strictly in
    (0, 1) per pixel and channel.
    """

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.feature = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.gate = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.attention = ChannelAttention(out_ch)

    def forward(self, a: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
        if b is not None:
            if a.shape[2:] != b.shape[2:]:
                raise ValueError(
                    f"spatial mismatch: {tuple(a.shape[2:])} vs {tuple(b.shape[2:])}"
                )
            a = torch.cat([a, b], dim=1)
        gated = F.leaky_relu(self.feature(a), LEAKY_SLOPE) * torch.sigmoid(self.gate(a))
        return self.attention(gated)


def upsample_to(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if x.shape[2:] == torch.Size(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)
