"""Full depth-completion model: fill, two-branch extraction, fusion, refinement.

Data flow for one sample: the sparse map and image are fused into a dense
feature plus a coarse bootstrap depth; the feature goes through a
convolutional branch (local detail) and an attention branch (global layout)
in parallel; the two pyramids are merged scale by scale under predicted
uncertainties; the finest fused depth is refined by non-local propagation
anchored on the raw sparse input.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from .refine import DEFAULT_ITERATIONS, DEFAULT_NEIGHBORS, NonLocalRefinement
from .sffm import SparseFeatureFill
from .twobranch import GlobalBranch, LocalBranch
from .uffm import DEFAULT_TOLERANCE, ScaleOutput, UncertaintyFusion


@dataclass
class ModelConfig:
    """Widths and switches that fully determine the network architecture."""

    sffm_channels: int = 32
    local_widths: tuple[int, ...] = (32, 48, 64, 96, 128)
    global_dims: tuple[int, ...] = (32, 48, 64, 96)
    global_depths: tuple[int, ...] = (1, 1, 2, 1)
    global_heads: tuple[int, ...] = (1, 2, 2, 4)
    global_sr_ratios: tuple[int, ...] = (4, 2, 2, 1)
    pyramid_widths: tuple[int, ...] = (32, 32, 48, 64)
    fusion_mode: str = "uncertainty"
    tolerance: float = DEFAULT_TOLERANCE
    refine_neighbors: int = DEFAULT_NEIGHBORS
    refine_iterations: int = DEFAULT_ITERATIONS
    depth_cap: float = 10.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        known = dict(data)
        for key, value in known.items():
            if isinstance(value, list):
                known[key] = tuple(value)
        return cls(**known)


@dataclass
class ModelOutput:
    """Everything one forward pass produces.

    ``scales`` is ordered coarse to fine; ``depth`` is the refined
    full-resolution prediction and ``coarse`` the bootstrap from the fill
    stage.
    """

    depth: torch.Tensor
    coarse: torch.Tensor
    scales: list[ScaleOutput] = field(default_factory=list)

    @property
    def finest(self) -> ScaleOutput:
        return self.scales[-1]


class SparseDC(nn.Module):
    """Depth completion from an RGB image and sparse depth measurements."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        c = self.cfg
        self.fill = SparseFeatureFill(c.sffm_channels)
        self.local_branch = LocalBranch(c.sffm_channels, c.local_widths, c.pyramid_widths)
        self.global_branch = GlobalBranch(
            c.sffm_channels,
            dims=c.global_dims,
            depths=c.global_depths,
            heads=c.global_heads,
            sr_ratios=c.global_sr_ratios,
            pyramid_widths=c.pyramid_widths,
        )
        self.fusion = UncertaintyFusion(c.pyramid_widths, c.tolerance, c.fusion_mode)
        self.refinement = NonLocalRefinement(
            c.pyramid_widths[0], c.refine_neighbors, c.refine_iterations
        )

    def forward(self, image: torch.Tensor, sparse: torch.Tensor) -> ModelOutput:
        if image.dim() != 4 or sparse.dim() != 4:
            raise ValueError("expected batched (B, C, H, W) inputs")
        feature, coarse = self.fill(image, sparse)
        local_pyramid = self.local_branch(feature)
        global_pyramid = self.global_branch(feature)
        scales = self.fusion(local_pyramid, global_pyramid, sparse)
        finest = scales[-1]
        depth = self.refinement(finest.depth, finest.fused, sparse)
        return ModelOutput(depth=depth, coarse=coarse, scales=scales)


def build_model(config: dict | ModelConfig | None = None) -> SparseDC:
    """Construct a model from a config mapping (e.g. a checkpoint snapshot)."""
    if config is None:
        return SparseDC()
    if isinstance(config, dict):
        config = ModelConfig.from_dict(config)
    return SparseDC(config)
