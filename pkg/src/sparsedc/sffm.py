"""Sparse feature filling front-end.

Builds a stable initial feature field from the RGB image and the sparse
depth map: unstable depth features are filled with image features through
gated convolutions, and a small head decodes a coarse depth map from the
result for intermediate supervision.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import ConvBlock, GatedFuse

COARSE_INIT_DEPTH = 2.0  # softplus bias target so untrained outputs sit mid-range


def init_depth_bias(conv: nn.Conv2d, target: float = COARSE_INIT_DEPTH) -> None:
    """Bias a depth head so softplus(bias) starts near ``target`` meters."""
    with torch.no_grad():
        conv.bias.fill_(math.log(math.expm1(target)))


class SparseFeatureFill(nn.Module):
    """Produce the initial feature field and a coarse depth estimate.

    The depth path sees the raw sparse map stacked with its validity mask,
    which disambiguates "no measurement" from "measured zero-ish depth".
    """

    def __init__(self, channels: int = 32):
        super().__init__()
        self.channels = channels
        self.image_stack = nn.Sequential(
            ConvBlock(3, channels), ConvBlock(channels, channels)
        )
        self.depth_stack = nn.Sequential(
            ConvBlock(2, channels), ConvBlock(channels, channels)
        )
        self.fill_gate = GatedFuse(2 * channels, channels)
        self.out_gate = GatedFuse(2 * channels, channels)
        self.coarse_head = nn.Sequential(
            ConvBlock(channels, channels), nn.Conv2d(channels, 1, 3, padding=1)
        )
        init_depth_bias(self.coarse_head[-1])

    def forward(
        self, image: torch.Tensor, sparse: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """image (B,3,H,W), sparse (B,1,H,W) -> (feature (B,C,H,W), coarse (B,1,H,W))."""
        if image.shape[2:] != sparse.shape[2:]:
            raise ValueError(
                f"image {tuple(image.shape[2:])} and sparse {tuple(sparse.shape[2:])} differ"
            )
        mask = (sparse > 0).to(sparse.dtype)
        rgb_feat = self.image_stack(image)
        dep_feat = self.depth_stack(torch.cat([sparse, mask], dim=1))
        filled = self.fill_gate(dep_feat, rgb_feat)
        feature = self.out_gate(filled, rgb_feat)
        coarse = F.softplus(self.coarse_head(feature))
        return feature, coarse
