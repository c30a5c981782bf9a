"""Training targets and losses.

The uncertainty target is relative: a prediction off by 10% of the true
depth (at the default tolerance 0.1) lands at 1 - 1/e ~ 0.63, and the
target saturates toward 1 as the error grows. Each scale is supervised on
both branch outputs and the fused output; scale terms are combined with
exponentially decaying weights so the finest resolution dominates, and the
coarse bootstrap depth plus the refined final depth get their own terms.

L2 terms are root-mean-square over valid pixels and L1 terms are mean
absolute error, so losses are comparable across resolutions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .uffm import ScaleOutput, sparsity_aware_pool

DEFAULT_TOLERANCE = 0.1
DEFAULT_DECAY = 0.8
DEFAULT_COARSE_WEIGHT = 0.05
SCALE_COUNT = 4

# keeps sqrt differentiable at an exact-zero mean square; shifts a perfect
# loss by 1e-8, far below test tolerances
_RMS_FLOOR = 1e-16


@dataclass
class LossConfig:
    tolerance: float = DEFAULT_TOLERANCE
    decay: float = DEFAULT_DECAY
    coarse_weight: float = DEFAULT_COARSE_WEIGHT
    scales: int = SCALE_COUNT

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError(f"tolerance must be positive, got {self.tolerance}")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")


def pseudo_uncertainty(
    depth: torch.Tensor, gt: torch.Tensor, tolerance: float = DEFAULT_TOLERANCE
) -> tuple[torch.Tensor, torch.Tensor]:
    """Uncertainty target 1 - exp(-|depth - gt| / (tolerance * gt)).

    Returns (target, valid) where valid marks gt > 0; the target is 0 at
    invalid pixels and those pixels must be excluded from losses.
    """
    if tolerance <= 0:
        raise ValueError(f"tolerance must be positive, got {tolerance}")
    valid = gt > 0
    denom = (tolerance * gt).clamp(min=1e-12)
    target = 1.0 - torch.exp(-(depth - gt).abs() / denom)
    return torch.where(valid, target, torch.zeros_like(target)), valid


def multiscale_gt(gt: torch.Tensor, levels: int = SCALE_COUNT) -> list[torch.Tensor]:
    """Ground truth at factors 1, 2, 4, ... via valid-pixel average pooling.

    Ordered fine to coarse; a pooled pixel is invalid (0) only when its whole
    window is invalid.
    """
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    return [sparsity_aware_pool(gt, 2**n) for n in range(levels)]


def masked_l1(pred: torch.Tensor, gt: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Mean |pred - gt| over gt-valid pixels; (0, 0) when nothing is valid."""
    valid = gt > 0
    n = int(valid.sum())
    if n == 0:
        return pred.new_zeros(()), 0
    return (pred - gt).abs()[valid].mean(), n


def masked_l2(pred: torch.Tensor, gt: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Root mean square of pred - gt over gt-valid pixels; (0, 0) when empty."""
    valid = gt > 0
    n = int(valid.sum())
    if n == 0:
        return pred.new_zeros(()), 0
    return ((pred - gt)[valid] ** 2).mean().clamp(min=_RMS_FLOOR).sqrt(), n


def scale_loss(
    depth: torch.Tensor,
    uncertainty: torch.Tensor,
    gt: torch.Tensor,
    tolerance: float = DEFAULT_TOLERANCE,
) -> tuple[torch.Tensor, int]:
    """One prediction's term: 0.5 * L1(uncertainty, target) + L2(depth, gt).

    Returns (loss, n_valid); n_valid == 0 signals that gt offered no
    supervision and the loss is an exact zero.
    """
    target, valid = pseudo_uncertainty(depth, gt, tolerance)
    n = int(valid.sum())
    if n == 0:
        return depth.new_zeros(()), 0
    unc_term = (uncertainty - target).abs()[valid].mean()
    depth_term = ((depth - gt)[valid] ** 2).mean().clamp(min=_RMS_FLOOR).sqrt()
    return 0.5 * unc_term + depth_term, n


@dataclass
class ScaleLossTerms:
    """Loss parts for one scale; ``rec`` = 0.5*(global+local) + fused."""

    factor: int
    weight: float
    global_term: float
    local_term: float
    fused_term: float
    rec: float

    def to_dict(self) -> dict:
        return {
            "factor": self.factor,
            "weight": self.weight,
            "global": self.global_term,
            "local": self.local_term,
            "fused": self.fused_term,
            "rec": self.rec,
        }


@dataclass
class LossBreakdown:
    """All loss terms plus the combined total (a live graph tensor).

    ``total`` = sum_n weight_n * rec_n + coarse_weight * coarse
    + final_l1 + final_l2. ``supervised_pixels`` counts valid full-resolution
    gt pixels; 0 means the sample carried no supervision at all.
    """

    total: torch.Tensor
    scale_terms: list[ScaleLossTerms] = field(default_factory=list)
    coarse_term: float = 0.0
    coarse_weight: float = DEFAULT_COARSE_WEIGHT
    final_l1: float = 0.0
    final_l2: float = 0.0
    supervised_pixels: int = 0

    def to_dict(self) -> dict:
        return {
            "total": float(self.total.detach()),
            "scales": [t.to_dict() for t in self.scale_terms],
            "coarse": self.coarse_term,
            "coarse_weight": self.coarse_weight,
            "final_l1": self.final_l1,
            "final_l2": self.final_l2,
            "supervised_pixels": self.supervised_pixels,
        }


def total_loss(
    scales: list[ScaleOutput],
    gt: torch.Tensor,
    coarse_depth: torch.Tensor,
    final_depth: torch.Tensor,
    cfg: LossConfig | None = None,
) -> LossBreakdown:
    """Combine per-scale, coarse, and final terms into the training loss.

    ``scales`` may come in any order; each entry's ``factor`` selects the
    matching pooled ground truth and the weight decay^log2(factor), so the
    full-resolution scale always has weight 1.
    """
    cfg = cfg or LossConfig()
    targets = multiscale_gt(gt, cfg.scales)
    total = gt.new_zeros(())
    terms: list[ScaleLossTerms] = []
    for out in sorted(scales, key=lambda s: s.factor):
        level = int(math.log2(out.factor))
        weight = cfg.decay**level
        gt_n = targets[level]
        g_loss, _ = scale_loss(out.global_depth, out.global_uncertainty, gt_n, cfg.tolerance)
        l_loss, _ = scale_loss(out.local_depth, out.local_uncertainty, gt_n, cfg.tolerance)
        f_loss, _ = scale_loss(out.depth, out.uncertainty, gt_n, cfg.tolerance)
        rec = 0.5 * (g_loss + l_loss) + f_loss
        total = total + weight * rec
        terms.append(
            ScaleLossTerms(
                factor=out.factor,
                weight=weight,
                global_term=float(g_loss.detach()),
                local_term=float(l_loss.detach()),
                fused_term=float(f_loss.detach()),
                rec=float(rec.detach()),
            )
        )
    coarse_l2, _ = masked_l2(coarse_depth, gt)
    final_l1, n_valid = masked_l1(final_depth, gt)
    final_l2, _ = masked_l2(final_depth, gt)
    total = total + cfg.coarse_weight * coarse_l2 + final_l1 + final_l2
    return LossBreakdown(
        total=total,
        scale_terms=terms,
        coarse_term=float(coarse_l2.detach()),
        coarse_weight=cfg.coarse_weight,
        final_l1=float(final_l1.detach()),
        final_l2=float(final_l2.detach()),
        supervised_pixels=n_valid,
    )
