"""End-to-end training, evaluation and file-to-file completion.

Training follows a plateau schedule: validation RMSE under a fixed
500-point sampling decides improvement; the learning rate is multiplied by
the decay factor after every 5 consecutive unimproved epochs and training
stops after 10. Every optimization step appends one JSON line to
``train_log.jsonl`` in the run directory, and the best checkpoint is written
atomically, so a crashed run never leaves a torn file behind.

Runs are deterministic on a fixed device: sample order, point sampling and
augmentation all derive from the run seed, never from global RNG state.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from .depthio import ManifestDataset, Sample, read_depth, read_image, write_depth, write_image
from .metrics import MetricsReport, aggregate, compute_metrics
from .network import ModelConfig, SparseDC
from .objective import LossConfig, total_loss
from .patterns import PatternSpec, apply_pattern, derive_seed, mask_rows, sample_random


class ConfigError(ValueError):
    """Raised for invalid or incompatible configuration."""


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; message names the batch."""


@dataclass
class TrainConfig:
    """Everything a training run needs; serializes to/from YAML."""

    manifest: str = ""
    out_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    batch_size: int = 2
    lr: float = 1e-4
    lr_decay: float = 0.3
    plateau_patience: int = 5
    early_stop_patience: int = 10
    max_epochs: int = 100
    max_steps: int | None = None
    grad_clip: float = 1.0
    train_points_min: int = 5
    train_points_max: int = 500
    row_mask_fraction: float = 0.0
    preprocess: str = "none"
    seed: int = 0
    val_points: int = 500
    val_seed: int = 99

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 < self.lr_decay < 1.0:
            raise ConfigError(f"lr_decay must be in (0, 1), got {self.lr_decay}")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 1 <= self.train_points_min <= self.train_points_max:
            raise ConfigError(
                f"need 1 <= train_points_min <= train_points_max, got "
                f"{self.train_points_min}..{self.train_points_max}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        model = data.pop("model", None)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        if model is not None:
            cfg.model = ModelConfig.from_dict(model)
        return cfg

    @classmethod
    def from_yaml(cls, path: str | os.PathLike) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"config root must be a mapping: {path}")
        return cls.from_dict(data)


@dataclass
class Checkpoint:
    """A restorable training state; ``config`` alone rebuilds the model."""

    model_state: dict
    optimizer_state: dict
    epoch: int
    best_val_rmse: float
    config: dict

    def save(self, path: str | os.PathLike) -> None:
        """Write atomically (temp file + rename) so readers never see a torn file."""
        path = os.fspath(path)
        payload = {
            "model_state": self.model_state,
            "optimizer_state": self.optimizer_state,
            "epoch": self.epoch,
            "best_val_rmse": self.best_val_rmse,
            "config": self.config,
        }
        tmp = path + ".tmp"
        torch.save(payload, tmp)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        data = torch.load(os.fspath(path), map_location="cpu")
        return cls(**data)

    def build_model(self) -> SparseDC:
        model = SparseDC(ModelConfig.from_dict(self.config["model"]))
        model.load_state_dict(self.model_state)
        model.eval()
        return model


def _to_tensors(sample: Sample, sparse: np.ndarray) -> tuple[torch.Tensor, ...]:
    image = torch.from_numpy(np.ascontiguousarray(sample.image.transpose(2, 0, 1)))
    return (
        image.float(),
        torch.from_numpy(sparse).float().unsqueeze(0),
        torch.from_numpy(sample.gt).float().unsqueeze(0),
    )


def _stack(tensors: list[torch.Tensor], ids: list[str]) -> torch.Tensor:
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) > 1:
        raise ConfigError(f"cannot batch samples of different sizes: {ids}")
    return torch.stack(tensors)


def _training_sparse(sample: Sample, cfg: TrainConfig, epoch: int) -> np.ndarray:
    """Sparse input for one training sample: 5..500 random points, optional row dropout."""
    rs = np.random.default_rng(derive_seed(cfg.seed, f"aug|{epoch}|{sample.id}"))
    n = int(rs.integers(cfg.train_points_min, cfg.train_points_max + 1))
    sparse = sample_random(sample.gt, n, int(rs.integers(0, 2**63 - 1)))
    if cfg.row_mask_fraction > 0:
        sparse = mask_rows(sparse, cfg.row_mask_fraction, int(rs.integers(0, 2**63 - 1)))
    return sparse


def evaluate_model(
    model: SparseDC,
    samples: list[Sample],
    pattern: PatternSpec | None,
) -> MetricsReport:
    """Run inference over samples and pool the per-image metrics.

    ``pattern`` draws the sparse input from each ground truth (seeded per
    sample id); None means an all-empty sparse input. Metrics are always
    computed against every valid ground-truth pixel.
    """
    model.eval()
    reports = []
    with torch.no_grad():
        for sample in samples:
            if pattern is None:
                sparse = np.zeros_like(sample.gt)
            else:
                sparse = apply_pattern(pattern, sample.gt, sample.image, sample_id=sample.id)
            image_t, sparse_t, _ = _to_tensors(sample, sparse)
            out = model(image_t.unsqueeze(0), sparse_t.unsqueeze(0))
            pred = out.depth[0, 0].numpy()
            reports.append(compute_metrics(pred, sample.gt))
    return aggregate(reports)


def _resolve_model(checkpoint) -> SparseDC:
    if isinstance(checkpoint, SparseDC):
        return checkpoint
    if isinstance(checkpoint, (str, os.PathLike)):
        checkpoint = Checkpoint.load(checkpoint)
    if isinstance(checkpoint, Checkpoint):
        return checkpoint.build_model()
    raise ConfigError(f"cannot build a model from {type(checkpoint).__name__}")


def evaluate(
    checkpoint,
    manifest: str | os.PathLike,
    pattern: PatternSpec | None,
    split: str | None = None,
    preprocess: str = "none",
) -> MetricsReport:
    """Evaluate a checkpoint (path, Checkpoint, or model) on a manifest."""
    model = _resolve_model(checkpoint)
    dataset = ManifestDataset(os.fspath(manifest), split=split, preprocess=preprocess)
    if len(dataset) == 0:
        raise ConfigError(f"manifest holds no samples for split {split!r}: {manifest}")
    samples = [dataset[i] for i in range(len(dataset))]
    return evaluate_model(model, samples, pattern)


def complete(
    checkpoint,
    image_path: str | os.PathLike,
    sparse_path: str | os.PathLike,
    out_path: str | os.PathLike,
    dump_weights: bool = False,
) -> Path:
    """Complete one image/sparse-depth pair and write the 16-bit result.

    With ``dump_weights``, also writes the per-scale local-branch weight maps
    (1 - uncertainty) as grayscale images next to the output.
    """
    model = _resolve_model(checkpoint)
    image = read_image(image_path)
    sparse = read_depth(sparse_path)
    if image.shape[:2] != sparse.shape:
        raise ConfigError(
            f"image {image.shape[:2]} and sparse {sparse.shape} sizes differ"
        )
    sample = Sample(image=image, sparse=sparse, gt=np.ones_like(sparse), id="complete")
    image_t, sparse_t, _ = _to_tensors(sample, sparse)
    model.eval()
    with torch.no_grad():
        out = model(image_t.unsqueeze(0), sparse_t.unsqueeze(0))
    cap = model.cfg.depth_cap
    depth = out.depth[0, 0].clamp(0.0, cap).numpy()
    out_path = Path(out_path)
    write_depth(out_path, depth)
    if dump_weights:
        for scale in out.scales:
            weight = (1.0 - scale.local_uncertainty[0, 0]).clamp(0.0, 1.0).numpy()
            write_image(
                out_path.with_name(f"{out_path.stem}_local_weight_x{scale.factor}.png"),
                weight,
            )
    return out_path


class _JsonlLogger:
    def __init__(self, path: Path):
        self.file = open(path, "w", encoding="utf-8")

    def write(self, record: dict) -> None:
        self.file.write(json.dumps(record) + "\n")
        self.file.flush()

    def close(self) -> None:
        self.file.close()


def train(cfg: TrainConfig) -> Checkpoint:
    """Train per the config and return the best checkpoint.

    The run directory receives ``train_log.jsonl`` (one record per step plus
    epoch summaries) and ``best.pt``. Validation uses the ``val`` split when
    the manifest has one, otherwise the training split.
    """
    if not cfg.manifest:
        raise ConfigError("config must set a manifest path")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    best_path = out_dir / "best.pt"
    log = _JsonlLogger(out_dir / "train_log.jsonl")

    torch.manual_seed(cfg.seed)
    model = SparseDC(cfg.model)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    loss_cfg = LossConfig(tolerance=cfg.model.tolerance)

    dataset = ManifestDataset(cfg.manifest, split="train", preprocess=cfg.preprocess)
    if len(dataset) == 0:
        raise ConfigError(f"manifest holds no train samples: {cfg.manifest}")
    train_samples = [dataset[i] for i in range(len(dataset))]
    val_dataset = ManifestDataset(cfg.manifest, split="val", preprocess=cfg.preprocess)
    if len(val_dataset) > 0:
        val_samples = [val_dataset[i] for i in range(len(val_dataset))]
    else:
        val_samples = train_samples
    val_pattern = PatternSpec(
        kind="random_n", params={"n": cfg.val_points}, seed=cfg.val_seed
    )

    best = float("inf")
    since_improve = 0
    step = 0
    out_of_steps = False
    try:
        for epoch in range(cfg.max_epochs):
            model.train()
            order = np.random.default_rng(
                derive_seed(cfg.seed, f"order|{epoch}")
            ).permutation(len(train_samples))
            for start in range(0, len(order), cfg.batch_size):
                chosen = [train_samples[i] for i in order[start : start + cfg.batch_size]]
                ids = [s.id for s in chosen]
                tensors = [
                    _to_tensors(s, _training_sparse(s, cfg, epoch)) for s in chosen
                ]
                images = _stack([t[0] for t in tensors], ids)
                sparses = _stack([t[1] for t in tensors], ids)
                gts = _stack([t[2] for t in tensors], ids)

                out = model(images, sparses)
                breakdown = total_loss(out.scales, gts, out.coarse, out.depth, loss_cfg)
                if not torch.isfinite(breakdown.total):
                    log.write({"event": "abort", "reason": "non-finite loss",
                               "step": step + 1, "epoch": epoch, "batch": ids})
                    raise TrainingDiverged(
                        f"non-finite loss at step {step + 1} on batch {ids}"
                    )
                optimizer.zero_grad()
                breakdown.total.backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optimizer.step()
                step += 1
                log.write({
                    "event": "step",
                    "step": step,
                    "epoch": epoch,
                    "lr": optimizer.param_groups[0]["lr"],
                    "batch": ids,
                    "loss": breakdown.to_dict(),
                })
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    out_of_steps = True
                    break

            report = evaluate_model(model, val_samples, val_pattern)
            improved = report.rmse < best
            if improved:
                best = report.rmse
                since_improve = 0
                Checkpoint(
                    model_state=model.state_dict(),
                    optimizer_state=optimizer.state_dict(),
                    epoch=epoch,
                    best_val_rmse=best,
                    config=cfg.to_dict(),
                ).save(best_path)
            else:
                since_improve += 1
            log.write({
                "event": "epoch",
                "epoch": epoch,
                "val_rmse": report.rmse,
                "best_val_rmse": best,
                "improved": improved,
                "since_improve": since_improve,
                "lr": optimizer.param_groups[0]["lr"],
            })
            if out_of_steps:
                break
            if since_improve >= cfg.early_stop_patience:
                log.write({"event": "early_stop", "epoch": epoch})
                break
            if since_improve > 0 and since_improve % cfg.plateau_patience == 0:
                for group in optimizer.param_groups:
                    group["lr"] *= cfg.lr_decay
                log.write({
                    "event": "lr_decay",
                    "epoch": epoch,
                    "lr": optimizer.param_groups[0]["lr"],
                })
    finally:
        log.close()
    return Checkpoint.load(best_path)
