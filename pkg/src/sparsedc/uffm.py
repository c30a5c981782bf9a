"""Uncertainty-guided fusion of the local and global feature pyramids.

At each scale, small heads predict a depth and an uncertainty per branch.
Where the pooled sparse input carries a measurement, the predicted branch
uncertainty is replaced by the measurement-consistency value
1 - exp(-|depth - measured| / (tolerance * measured)), so a branch that
agrees with the sensor is trusted fully there. The branch features are then
blended with weights (1 - uncertainty) through a gated convolution, and a
third head produces the fused depth and uncertainty for the scale. Scales
run coarse to fine; each scale is conditioned on the upsampled previous
depth and uncertainty.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import GatedFuse, upsample_to
from .sffm import init_depth_bias

DEFAULT_TOLERANCE = 0.1
SCALE_FACTORS = (1, 2, 4, 8)
_SAFE_DENOM = 1e-12

FUSION_MODES = ("uncertainty", "plain")


def sparsity_aware_pool(sparse: torch.Tensor, factor: int) -> torch.Tensor:
    """Downsample a sparse depth map by averaging valid pixels per window.

    Output pixels whose factor x factor window holds no valid pixel are 0.
    Output size is ceil(input / factor), matching strided-conv feature sizes.
    """
    if factor not in (1, 2, 4, 8):
        raise ValueError(f"factor must be one of 1, 2, 4, 8, got {factor}")
    if factor == 1:
        return sparse.clone()
    *lead, h, w = sparse.shape
    oh, ow = -(-h // factor), -(-w // factor)
    padded = F.pad(sparse, (0, ow * factor - w, 0, oh * factor - h))
    windows = padded.reshape(*lead, oh, factor, ow, factor)
    mask = (windows > 0).to(sparse.dtype)
    counts = mask.sum(dim=(-3, -1))
    sums = (windows * mask).sum(dim=(-3, -1))
    return torch.where(counts > 0, sums / counts.clamp(min=1), torch.zeros_like(sums))


def replace_uncertainty(
    uncertainty: torch.Tensor,
    depth: torch.Tensor,
    pooled_sparse: torch.Tensor,
    tolerance: float = DEFAULT_TOLERANCE,
) -> torch.Tensor:
    """Override uncertainty with measurement consistency where depth was measured.

    At pixels with a valid pooled measurement the result is
    1 - exp(-|depth - measured| / (tolerance * measured)); elsewhere the
    input uncertainty passes through unchanged.
    """
    if tolerance <= 0:
        raise ValueError(f"tolerance must be positive, got {tolerance}")
    measured = pooled_sparse > 0
    denom = (tolerance * pooled_sparse).clamp(min=_SAFE_DENOM)
    consistency = 1.0 - torch.exp(-(depth - pooled_sparse).abs() / denom)
    return torch.where(measured, consistency, uncertainty)


class DepthUncertaintyHead(nn.Module):
    """Two parallel conv layers: depth via softplus, uncertainty via sigmoid."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.depth = nn.Conv2d(in_channels, 1, 3, padding=1)
        self.uncertainty = nn.Conv2d(in_channels, 1, 3, padding=1)
        init_depth_bias(self.depth)

    def forward(self, feature: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return F.softplus(self.depth(feature)), torch.sigmoid(self.uncertainty(feature))


class UncertaintyGatedFusion(nn.Module):
    """Blend branch features weighted by confidence, then gate.

    ``uncertainty`` mode feeds (1-u_local)*local and (1-u_global)*global into
    the gate; ``plain`` mode feeds the raw features (the ablation variant).
    With both uncertainties zero the two modes coincide exactly.
    """

    def __init__(self, width: int):
        super().__init__()
        self.gate = GatedFuse(2 * width, width)

    def forward(
        self,
        local_feat: torch.Tensor,
        global_feat: torch.Tensor,
        local_unc: torch.Tensor,
        global_unc: torch.Tensor,
        mode: str = "uncertainty",
    ) -> torch.Tensor:
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {mode!r}")
        if mode == "uncertainty":
            local_feat = (1.0 - local_unc) * local_feat
            global_feat = (1.0 - global_unc) * global_feat
        return self.gate(local_feat, global_feat)


@dataclass
class ScaleOutput:
    """Everything one fusion scale produces.

    ``factor`` is the downsampling factor of this scale (1 = full resolution).
    Branch depths/uncertainties are kept for supervision; the branch
    uncertainties are the replaced ones that guided the fusion.
    """

    factor: int
    depth: torch.Tensor
    uncertainty: torch.Tensor
    fused: torch.Tensor
    local_depth: torch.Tensor
    local_uncertainty: torch.Tensor
    global_depth: torch.Tensor
    global_uncertainty: torch.Tensor


class FusionBlock(nn.Module):
    """One scale of the cascade: branch heads, replacement, gated fusion."""

    def __init__(self, width: int, tolerance: float = DEFAULT_TOLERANCE):
        super().__init__()
        self.tolerance = tolerance
        self.local_head = DepthUncertaintyHead(width + 2)
        self.global_head = DepthUncertaintyHead(width + 2)
        self.fusion = UncertaintyGatedFusion(width)
        self.fused_head = DepthUncertaintyHead(width)

    def forward(self, local_feat, global_feat, pooled_sparse, prev_depth, prev_unc, mode):
        conditioned_l = torch.cat([local_feat, prev_depth, prev_unc], dim=1)
        conditioned_g = torch.cat([global_feat, prev_depth, prev_unc], dim=1)
        local_depth, local_unc = self.local_head(conditioned_l)
        global_depth, global_unc = self.global_head(conditioned_g)
        local_unc = replace_uncertainty(
            local_unc, local_depth, pooled_sparse, self.tolerance
        )
        global_unc = replace_uncertainty(
            global_unc, global_depth, pooled_sparse, self.tolerance
        )
        fused = self.fusion(local_feat, global_feat, local_unc, global_unc, mode)
        depth, uncertainty = self.fused_head(fused)
        return ScaleOutput(
            factor=0,  # filled by the caller
            depth=depth,
            uncertainty=uncertainty,
            fused=fused,
            local_depth=local_depth,
            local_uncertainty=local_unc,
            global_depth=global_depth,
            global_uncertainty=global_unc,
        )


class UncertaintyFusion(nn.Module):
    """Coarse-to-fine cascade of fusion blocks over scales {1/8, ..., 1}.

    Heads are independent per scale. Set ``condition_on_previous`` to False to
    zero the previous-scale feed (wiring diagnostics only).
    """

    def __init__(
        self,
        pyramid_widths: tuple[int, ...] = (32, 32, 48, 64),
        tolerance: float = DEFAULT_TOLERANCE,
        mode: str = "uncertainty",
    ):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {mode!r}")
        if len(pyramid_widths) != len(SCALE_FACTORS):
            raise ValueError(f"expected {len(SCALE_FACTORS)} pyramid widths")
        self.mode = mode
        self.tolerance = tolerance
        self.condition_on_previous = True
        self.blocks = nn.ModuleList(
            FusionBlock(w, tolerance) for w in pyramid_widths
        )

    def forward(
        self,
        local_pyramid: list[torch.Tensor],
        global_pyramid: list[torch.Tensor],
        sparse: torch.Tensor,
        mode: str | None = None,
    ) -> list[ScaleOutput]:
        """Run all scales; returns ScaleOutputs ordered coarse to fine."""
        mode = self.mode if mode is None else mode
        outputs: list[ScaleOutput] = []
        prev_depth = prev_unc = None
        for level in reversed(range(len(SCALE_FACTORS))):
            factor = SCALE_FACTORS[level]
            local_feat = local_pyramid[level]
            global_feat = global_pyramid[level]
            if local_feat.shape != global_feat.shape:
                raise ValueError(
                    f"branch pyramids disagree at scale 1/{factor}: "
                    f"{tuple(local_feat.shape)} vs {tuple(global_feat.shape)}"
                )
            size = local_feat.shape[2:]
            pooled = sparsity_aware_pool(sparse, factor)
            if prev_depth is None or not self.condition_on_previous:
                shape = (local_feat.shape[0], 1, *size)
                prev_d = local_feat.new_zeros(shape)
                prev_u = local_feat.new_zeros(shape)
            else:
                prev_d = upsample_to(prev_depth, size)
                prev_u = upsample_to(prev_unc, size)
            out = self.blocks[level](
                local_feat, global_feat, pooled, prev_d, prev_u, mode
            )
            out.factor = factor
            outputs.append(out)
            prev_depth, prev_unc = out.depth, out.uncertainty
        return outputs
