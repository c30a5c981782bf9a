"""Depth completion from sparse, non-uniform depth measurements and RGB."""

from .depthio import (
    DEPTH_SCALE,
    ManifestDataset,
    ManifestEntry,
    Sample,
    decode_depth,
    encode_depth,
    preprocess_nyu,
    read_depth,
    read_image,
    read_manifest,
    write_depth,
    write_image,
    write_manifest,
)
from .metrics import MetricsReport, aggregate, compute_metrics
from .network import ModelConfig, ModelOutput, SparseDC, build_model
from .objective import LossBreakdown, LossConfig, pseudo_uncertainty, total_loss
from .patterns import PATTERN_KINDS, PatternSpec, apply_pattern
from .pipeline import Checkpoint, TrainConfig, complete, evaluate, train
from .refine import NonLocalRefinement, PropagationPlan, propagate
from .sffm import SparseFeatureFill
from .synthetic import render_scene, write_demo_dataset
from .twobranch import GlobalBranch, LocalBranch
from .uffm import ScaleOutput, UncertaintyFusion, sparsity_aware_pool

__version__ = "0.1.0"

__all__ = [
    "DEPTH_SCALE",
    "Checkpoint",
    "GlobalBranch",
    "LocalBranch",
    "LossBreakdown",
    "LossConfig",
    "ManifestDataset",
    "ManifestEntry",
    "MetricsReport",
    "ModelConfig",
    "ModelOutput",
    "NonLocalRefinement",
    "PATTERN_KINDS",
    "PatternSpec",
    "PropagationPlan",
    "Sample",
    "ScaleOutput",
    "SparseDC",
    "SparseFeatureFill",
    "TrainConfig",
    "UncertaintyFusion",
    "aggregate",
    "apply_pattern",
    "build_model",
    "complete",
    "compute_metrics",
    "decode_depth",
    "encode_depth",
    "evaluate",
    "preprocess_nyu",
    "propagate",
    "pseudo_uncertainty",
    "read_depth",
    "read_image",
    "read_manifest",
    "render_scene",
    "sparsity_aware_pool",
    "total_loss",
    "train",
    "write_demo_dataset",
    "write_depth",
    "write_image",
    "write_manifest",
]
