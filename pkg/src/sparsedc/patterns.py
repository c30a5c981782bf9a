"""Seeded simulators for sparse-depth input patterns.

Every generator copies values from the ground truth, so the valid pixels of
the output are always a subset of the valid pixels of the input, and the
same (inputs, seed) pair reproduces the output bit for bit.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

PATTERN_KINDS = (
    "random_n",
    "shift_grid",
    "uneven_density",
    "keypoint",
    "big_holes",
    "row_mask",
)


class EmptyDepthError(ValueError):
    """Raised when a generator needs valid pixels but the map has none."""


def derive_seed(seed: int, sample_id: str) -> int:
    """Stable per-sample RNG seed so parallel loading is order-independent."""
    h = hashlib.blake2s(digest_size=8)
    h.update(str(int(seed)).encode("ascii"))
    h.update(b"|")
    h.update(sample_id.encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def _draw_random_points(gt: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    ys, xs = np.nonzero(gt > 0)
    if ys.size == 0:
        raise EmptyDepthError("ground truth has no valid pixels to sample from")
    count = min(int(n), ys.size)
    chosen = rng.choice(ys.size, size=count, replace=False)
    out = np.zeros_like(gt)
    out[ys[chosen], xs[chosen]] = gt[ys[chosen], xs[chosen]]
    return out


def sample_random(gt: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Keep exactly min(n, #valid) uniformly chosen valid pixels."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return _draw_random_points(gt, n, np.random.default_rng(seed))


def sample_shift_grid(gt: np.ndarray, stride: int, seed: int) -> np.ndarray:
    """Keep pixels on a regular lattice with a random per-call offset.

    Emulates low-resolution ToF sensor layouts. Lattice positions that are
    invalid in the ground truth stay invalid.
    """
    if stride < 2:
        raise ValueError(f"stride must be >= 2, got {stride}")
    rng = np.random.default_rng(seed)
    dy = int(rng.integers(0, stride))
    dx = int(rng.integers(0, stride))
    out = np.zeros_like(gt)
    out[dy::stride, dx::stride] = gt[dy::stride, dx::stride]
    return out


def sample_uneven(
    gt: np.ndarray, counts: tuple[int, int], seed: int
) -> np.ndarray:
    """Sample points restricted to two random rectangles of different sizes.

    Rectangle sides are drawn uniformly between 1/8 and 1/2 of the image
    dimension; rectangle i receives min(counts[i], valid pixels inside it)
    uniform samples. Everything outside both rectangles is invalid.
    """
    n1, n2 = counts
    if n1 < 1 or n2 < 1:
        raise ValueError(f"counts must be >= 1, got {counts}")
    rng = np.random.default_rng(seed)
    h, w = gt.shape
    out = np.zeros_like(gt)
    for n in (n1, n2):
        side_h = int(rng.integers(max(1, h // 8), max(2, h // 2) + 1))
        side_w = int(rng.integers(max(1, w // 8), max(2, w // 2) + 1))
        top = int(rng.integers(0, h - side_h + 1))
        left = int(rng.integers(0, w - side_w + 1))
        region = gt[top : top + side_h, left : left + side_w]
        ys, xs = np.nonzero(region > 0)
        if ys.size == 0:
            continue
        chosen = rng.choice(ys.size, size=min(n, ys.size), replace=False)
        out[top + ys[chosen], left + xs[chosen]] = region[ys[chosen], xs[chosen]]
    return out


def corner_response(image: np.ndarray) -> np.ndarray:
    """Per-pixel corner score: structure-tensor determinant minus 0.05 trace^2.

    Gradients are 3x3 Sobel, tensor entries are summed over a 3x3 window.
    A constant image scores exactly zero everywhere.
    """
    if image.ndim == 3:
        gray = image @ np.array([0.299, 0.587, 0.114], dtype=np.float64)
    else:
        gray = image.astype(np.float64)
    padded = np.pad(gray, 1, mode="edge")

    def shift(dy, dx):
        return padded[1 + dy : 1 + dy + gray.shape[0], 1 + dx : 1 + dx + gray.shape[1]]

    gx = (
        (shift(-1, 1) + 2 * shift(0, 1) + shift(1, 1))
        - (shift(-1, -1) + 2 * shift(0, -1) + shift(1, -1))
    )
    gy = (
        (shift(1, -1) + 2 * shift(1, 0) + shift(1, 1))
        - (shift(-1, -1) + 2 * shift(-1, 0) + shift(-1, 1))
    )

    def box3(a):
        p = np.pad(a, 1, mode="constant")
        return (
            p[:-2, :-2] + p[:-2, 1:-1] + p[:-2, 2:]
            + p[1:-1, :-2] + p[1:-1, 1:-1] + p[1:-1, 2:]
            + p[2:, :-2] + p[2:, 1:-1] + p[2:, 2:]
        )

    sxx = box3(gx * gx)
    syy = box3(gy * gy)
    sxy = box3(gx * gy)
    return sxx * syy - sxy * sxy - 0.05 * (sxx + syy) ** 2


def detect_corners(image: np.ndarray, nms_radius: int = 3) -> np.ndarray:
    """Corner positions as an (N, 2) array of (row, col), strongest first.

    Non-maximum suppression keeps one peak per (2 * radius + 1) square window.
    """
    score = corner_response(image)
    peak = score.max(initial=0.0)
    if peak <= 0:
        return np.zeros((0, 2), dtype=np.int64)
    threshold = 1e-3 * peak
    ys, xs = np.nonzero(score > threshold)
    order = np.argsort(score[ys, xs], kind="stable")[::-1]
    ys, xs = ys[order], xs[order]
    suppressed = np.zeros(score.shape, dtype=bool)
    h, w = score.shape
    kept = []
    for y, x in zip(ys, xs):
        if suppressed[y, x]:
            continue
        kept.append((y, x))
        y0, y1 = max(0, y - nms_radius), min(h, y + nms_radius + 1)
        x0, x1 = max(0, x - nms_radius), min(w, x + nms_radius + 1)
        suppressed[y0:y1, x0:x1] = True
    return np.array(kept, dtype=np.int64).reshape(-1, 2)


def sample_keypoints(
    gt: np.ndarray, image: np.ndarray, k: int, nms_radius: int = 3
) -> np.ndarray:
    """Keep depth at the k strongest texture corners that are valid in gt.

    Deterministic (no RNG). If fewer than k corners exist, all are returned.
    """
    if image.shape[:2] != gt.shape:
        raise ValueError(
            f"image {image.shape[:2]} and depth {gt.shape} dimensions differ"
        )
    out = np.zeros_like(gt)
    if k <= 0:
        return out
    corners = detect_corners(image, nms_radius)
    taken = 0
    for y, x in corners:
        if gt[y, x] > 0:
            out[y, x] = gt[y, x]
            taken += 1
            if taken >= k:
                break
    return out


def sample_big_holes(gt: np.ndarray, n: int, hole_side: int, seed: int) -> np.ndarray:
    """Random point sampling with one uniformly placed square knocked out."""
    h, w = gt.shape
    if hole_side > min(h, w):
        raise ValueError(f"hole side {hole_side} exceeds image {h}x{w}")
    rng = np.random.default_rng(seed)
    out = _draw_random_points(gt, n, rng)
    top = int(rng.integers(0, h - hole_side + 1))
    left = int(rng.integers(0, w - hole_side + 1))
    out[top : top + hole_side, left : left + hole_side] = 0.0
    return out


def mask_rows(sparse: np.ndarray, max_fraction: float, seed: int) -> np.ndarray:
    """Invalidate a random subset of rows, scanline-dropout style.

    The dropped fraction is drawn uniformly from [0, max_fraction]; rows are
    chosen independently, not as contiguous bands.
    """
    if not 0.0 <= max_fraction <= 0.95:
        raise ValueError(f"max_fraction must be in [0, 0.95], got {max_fraction}")
    rng = np.random.default_rng(seed)
    h = sparse.shape[0]
    fraction = rng.uniform(0.0, max_fraction)
    n_rows = int(np.floor(fraction * h))
    out = sparse.copy()
    if n_rows > 0:
        rows = rng.choice(h, size=n_rows, replace=False)
        out[rows, :] = 0.0
    return out


_DEFAULT_PARAMS = {
    "random_n": {"n": 500},
    "shift_grid": {"stride": 12},
    "uneven_density": {"n1": 400, "n2": 20},
    "keypoint": {"k": 500, "nms_radius": 3},
    "big_holes": {"n": 500, "hole_side": 200},
    "row_mask": {"max_fraction": 0.95},
}


@dataclass
class PatternSpec:
    """Declarative description of one sparsification pattern.

    Serializes to the CLI / config form ``kind:key=val,key=val`` with the
    seed carried as a ``seed`` key.
    """

    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PATTERN_KINDS:
            raise ValueError(
                f"unknown pattern kind {self.kind!r}; expected one of {PATTERN_KINDS}"
            )
        unknown = set(self.params) - set(_DEFAULT_PARAMS[self.kind])
        if unknown:
            raise ValueError(
                f"unknown parameters for {self.kind}: {sorted(unknown)}"
            )
        merged = dict(_DEFAULT_PARAMS[self.kind])
        merged.update(self.params)
        self.params = merged
        if self.kind == "random_n" and self.params["n"] < 1:
            raise ValueError("random_n requires n >= 1")
        if self.kind == "shift_grid" and self.params["stride"] < 2:
            raise ValueError("shift_grid requires stride >= 2")
        if self.kind == "uneven_density" and (
            self.params["n1"] < 1 or self.params["n2"] < 1
        ):
            raise ValueError("uneven_density requires n1, n2 >= 1")
        if self.kind == "row_mask" and not 0.0 <= self.params["max_fraction"] <= 0.95:
            raise ValueError("row_mask requires max_fraction in [0, 0.95]")

    @classmethod
    def parse(cls, text: str) -> "PatternSpec":
        kind, _, rest = text.partition(":")
        params: dict = {}
        seed = 0
        if rest:
            for item in rest.split(","):
                key, sep, value = item.partition("=")
                if not sep or not key:
                    raise ValueError(f"malformed pattern parameter {item!r} in {text!r}")
                num = float(value)
                num = int(num) if num == int(num) else num
                if key.strip() == "seed":
                    seed = int(num)
                else:
                    params[key.strip()] = num
        return cls(kind=kind.strip(), params=params, seed=seed)

    def format(self) -> str:
        items = [f"{k}={v}" for k, v in sorted(self.params.items())]
        items.append(f"seed={self.seed}")
        return f"{self.kind}:{','.join(items)}"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "seed": self.seed}

    @classmethod
    def from_dict(cls, data: dict) -> "PatternSpec":
        return cls(
            kind=data["kind"],
            params=dict(data.get("params", {})),
            seed=int(data.get("seed", 0)),
        )


def apply_pattern(
    spec: PatternSpec,
    gt: np.ndarray,
    image: np.ndarray | None = None,
    sample_id: str | None = None,
) -> np.ndarray:
    """Run the generator described by ``spec`` on one ground-truth map.

    When ``sample_id`` is given, the effective seed is derived from it so each
    sample gets an independent, reproducible stream.
    """
    seed = spec.seed if sample_id is None else derive_seed(spec.seed, sample_id)
    p = spec.params
    if spec.kind == "random_n":
        return sample_random(gt, int(p["n"]), seed)
    if spec.kind == "shift_grid":
        return sample_shift_grid(gt, int(p["stride"]), seed)
    if spec.kind == "uneven_density":
        return sample_uneven(gt, (int(p["n1"]), int(p["n2"])), seed)
    if spec.kind == "keypoint":
        if image is None:
            raise ValueError("keypoint pattern needs the RGB image")
        return sample_keypoints(gt, image, int(p["k"]), int(p["nms_radius"]))
    if spec.kind == "big_holes":
        side = min(int(p["hole_side"]), min(gt.shape))
        return sample_big_holes(gt, int(p["n"]), side, seed)
    if spec.kind == "row_mask":
        return mask_rows(gt, float(p["max_fraction"]), seed)
    raise ValueError(f"unknown pattern kind {spec.kind!r}")
