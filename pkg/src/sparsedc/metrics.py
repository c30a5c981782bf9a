"""Depth-completion evaluation metrics over valid ground-truth pixels."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

CSV_COLUMNS = (
    "rmse",
    "mae",
    "irmse",
    "imae",
    "rel",
    "delta1",
    "delta2",
    "delta3",
    "n_valid",
)

DELTA_BASE = 1.25


class EmptyEvaluationError(ValueError):
    """Raised when there are no valid ground-truth pixels to evaluate on."""


@dataclass
class MetricsReport:
    """Aggregatable evaluation result.

    ``n_valid`` counts ground-truth-valid pixels; ``n_inverse`` counts the
    subset where the prediction is also positive, which is the population the
    inverse-depth metrics are averaged over.
    """

    rmse: float
    mae: float
    irmse: float
    imae: float
    rel: float
    delta1: float
    delta2: float
    delta3: float
    n_valid: int
    n_inverse: int

    def to_csv_row(self) -> str:
        return ",".join(
            f"{getattr(self, c):d}" if c == "n_valid" else f"{getattr(self, c):.6f}"
            for c in CSV_COLUMNS
        )

    @staticmethod
    def csv_header() -> str:
        return ",".join(CSV_COLUMNS)

    def to_json(self) -> str:
        data = {c: getattr(self, c) for c in CSV_COLUMNS}
        data["n_inverse"] = self.n_inverse
        return json.dumps(data)


def compute_metrics(pred: np.ndarray, gt: np.ndarray) -> MetricsReport:
    """Evaluate a predicted depth map against ground truth.

    All metrics are means over gt-valid pixels, except the inverse metrics
    which skip pixels where the prediction is 0 (those still count as error
    gt in rmse/mae and miss every delta threshold).
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    mask = gt > 0
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise EmptyEvaluationError("ground truth has no valid pixels")
    p = pred[mask].astype(np.float64)
    g = gt[mask].astype(np.float64)

    err = p - g
    rmse = float(np.sqrt(np.mean(err**2)))
    mae = float(np.mean(np.abs(err)))
    rel = float(np.mean(np.abs(err) / g))

    with np.errstate(divide="ignore"):
        ratio = np.maximum(p / g, np.where(p > 0, g / p, np.inf))
    delta1 = float(np.mean(ratio < DELTA_BASE))
    delta2 = float(np.mean(ratio < DELTA_BASE**2))
    delta3 = float(np.mean(ratio < DELTA_BASE**3))

    inv = p > 0
    n_inverse = int(inv.sum())
    if n_inverse > 0:
        inv_err = 1.0 / p[inv] - 1.0 / g[inv]
        irmse = float(np.sqrt(np.mean(inv_err**2)))
        imae = float(np.mean(np.abs(inv_err)))
    else:
        irmse = 0.0
        imae = 0.0

    return MetricsReport(
        rmse=rmse,
        mae=mae,
        irmse=irmse,
        imae=imae,
        rel=rel,
        delta1=delta1,
        delta2=delta2,
        delta3=delta3,
        n_valid=n_valid,
        n_inverse=n_inverse,
    )


def aggregate(
    reports: list[MetricsReport], weights: list[int] | None = None
) -> MetricsReport:
    """Pool per-image reports as if their pixels were evaluated together.

    Mean-based metrics combine as weighted means of the underlying per-pixel
    statistics (squared errors are pooled before the final root), so
    aggregating a partition of one image reproduces the whole-image report.
    """
    if not reports:
        raise ValueError("cannot aggregate an empty list of reports")
    if weights is None:
        weights = [r.n_valid for r in reports]
    if len(weights) != len(reports):
        raise ValueError("weights and reports must have the same length")

    w = np.array(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("aggregate weights sum to zero")

    def pool(values, wts):
        wts = np.asarray(wts, dtype=np.float64)
        s = wts.sum()
        return float(np.dot(np.asarray(values, dtype=np.float64), wts) / s) if s > 0 else 0.0

    w_inv = [r.n_inverse for r in reports]
    return MetricsReport(
        rmse=float(np.sqrt(pool([r.rmse**2 for r in reports], w))),
        mae=pool([r.mae for r in reports], w),
        irmse=float(np.sqrt(pool([r.irmse**2 for r in reports], w_inv))),
        imae=pool([r.imae for r in reports], w_inv),
        rel=pool([r.rel for r in reports], w),
        delta1=pool([r.delta1 for r in reports], w),
        delta2=pool([r.delta2 for r in reports], w),
        delta3=pool([r.delta3 for r in reports], w),
        n_valid=int(total),
        n_inverse=int(sum(w_inv)),
    )
