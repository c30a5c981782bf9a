"""Non-local spatial propagation refinement of the fused depth.

Small heads on the finest fused feature predict, per pixel, K fractional
neighbor offsets, K affinities, and a confidence. Depth is then iteratively
relaxed: each step replaces a pixel by a weighted average of itself and its
bilinearly sampled neighbors, and pixels with a raw sparse measurement are
pulled back toward it in proportion to (1 - confidence). Affinities are
non-negative and sum to at most 1 per pixel, which makes every update a
convex combination — values never escape the range of the inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import ConvBlock

DEFAULT_NEIGHBORS = 8
DEFAULT_ITERATIONS = 6


@dataclass
class PropagationPlan:
    """Per-pixel recipe for one refinement pass.

    offsets: (B, K, 2, H, W) fractional (dy, dx) displacements.
    affinities: (B, K, H, W), non-negative, sum over K <= 1 per pixel.
    confidence: (B, 1, H, W) in [0, 1]; 0 means trust the sparse input fully.
    """

    offsets: torch.Tensor
    affinities: torch.Tensor
    confidence: torch.Tensor

    def __post_init__(self):
        if self.offsets.dim() != 5 or self.offsets.shape[2] != 2:
            raise ValueError(f"offsets must be (B, K, 2, H, W), got {tuple(self.offsets.shape)}")
        if self.affinities.shape != self.offsets.shape[:2] + self.offsets.shape[3:]:
            raise ValueError("affinities shape does not match offsets")
        if not torch.isfinite(self.offsets).all():
            raise ValueError("offsets must be finite")


def normalize_affinities(raw: torch.Tensor) -> torch.Tensor:
    """Map raw head output to stable weights: |raw| / max(1, sum_k |raw|).

    The result is non-negative with per-pixel sum <= 1, so the propagation
    update is a convex combination and constant fields are fixed points.
    """
    magnitude = raw.abs()
    return magnitude / magnitude.sum(dim=1, keepdim=True).clamp(min=1.0)


def _ring_offsets(k: int, radius: float = 1.5) -> torch.Tensor:
    """Base (dy, dx) offsets spread evenly on a circle; learned deltas add to these."""
    angles = [2.0 * math.pi * i / k for i in range(k)]
    return torch.tensor([[radius * math.sin(a), radius * math.cos(a)] for a in angles])


def _anchor(depth: torch.Tensor, sparse: torch.Tensor | None, confidence: torch.Tensor) -> torch.Tensor:
    if sparse is None:
        return depth
    valid = sparse > 0
    pulled = confidence * depth + (1.0 - confidence) * sparse
    return torch.where(valid, pulled, depth)


def _sample_grid(offsets: torch.Tensor) -> torch.Tensor:
    """Build a grid_sample grid (B, K*H, W, 2) from per-pixel offsets."""
    b, k, _, h, w = offsets.shape
    ys = torch.arange(h, device=offsets.device, dtype=offsets.dtype)
    xs = torch.arange(w, device=offsets.device, dtype=offsets.dtype)
    base_y, base_x = torch.meshgrid(ys, xs, indexing="ij")
    y = base_y + offsets[:, :, 0]
    x = base_x + offsets[:, :, 1]
    # normalize to [-1, 1] with align_corners=True conventions
    y = 2.0 * y / max(h - 1, 1) - 1.0
    x = 2.0 * x / max(w - 1, 1) - 1.0
    return torch.stack([x, y], dim=-1).reshape(b, k * h, w, 2)


def propagate(
    depth: torch.Tensor,
    plan: PropagationPlan,
    sparse: torch.Tensor | None = None,
    iterations: int = DEFAULT_ITERATIONS,
) -> torch.Tensor:
    """Run the iterative relaxation and return the refined depth (clamped >= 0).

    Anchoring on the sparse input happens once up front and again after
    every propagation step, so confidence 0 at a measured pixel pins the
    output to the measurement exactly.
    """
    if iterations < 0:
        raise ValueError(f"iterations must be >= 0, got {iterations}")
    b, _, h, w = depth.shape
    k = plan.affinities.shape[1]
    keep = (1.0 - plan.affinities.sum(dim=1, keepdim=True)).clamp(min=0.0)
    grid = _sample_grid(plan.offsets)
    current = _anchor(depth, sparse, plan.confidence)
    for _ in range(iterations):
        neighbors = F.grid_sample(
            current, grid, mode="bilinear", padding_mode="border", align_corners=True
        ).reshape(b, k, h, w)
        current = keep * current + (plan.affinities * neighbors).sum(dim=1, keepdim=True)
        current = _anchor(current, sparse, plan.confidence)
    return current.clamp(min=0.0)


class NonLocalRefinement(nn.Module):
    """Heads that turn the finest fused feature into a PropagationPlan."""

    def __init__(
        self,
        in_channels: int,
        neighbors: int = DEFAULT_NEIGHBORS,
        iterations: int = DEFAULT_ITERATIONS,
    ):
        super().__init__()
        if neighbors < 1:
            raise ValueError(f"neighbors must be >= 1, got {neighbors}")
        self.neighbors = neighbors
        self.iterations = iterations
        self.trunk = ConvBlock(in_channels, in_channels)
        self.offset_head = nn.Conv2d(in_channels, 2 * neighbors, 3, padding=1)
        self.affinity_head = nn.Conv2d(in_channels, neighbors, 3, padding=1)
        self.confidence_head = nn.Conv2d(in_channels, 1, 3, padding=1)
        self.register_buffer("base_offsets", _ring_offsets(neighbors), persistent=False)

    def plan_from_features(self, feature: torch.Tensor) -> PropagationPlan:
        b, _, h, w = feature.shape
        trunk = self.trunk(feature)
        deltas = self.offset_head(trunk).reshape(b, self.neighbors, 2, h, w)
        offsets = deltas + self.base_offsets.reshape(1, self.neighbors, 2, 1, 1)
        affinities = normalize_affinities(self.affinity_head(trunk))
        confidence = torch.sigmoid(self.confidence_head(trunk))
        return PropagationPlan(offsets=offsets, affinities=affinities, confidence=confidence)

    def forward(
        self,
        depth: torch.Tensor,
        feature: torch.Tensor,
        sparse: torch.Tensor | None = None,
        iterations: int | None = None,
    ) -> torch.Tensor:
        if depth.shape[2:] != feature.shape[2:]:
            raise ValueError(
                f"depth {tuple(depth.shape[2:])} and feature {tuple(feature.shape[2:])} "
                "sizes must match"
            )
        plan = self.plan_from_features(feature)
        steps = self.iterations if iterations is None else iterations
        return propagate(depth, plan, sparse, steps)
