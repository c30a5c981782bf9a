"""Depth map encoding, raster I/O, NYU-style preprocessing and manifest datasets.

Depth maps are float32 arrays of metric depth in meters; a value of 0.0 marks
a pixel with no measurement. On disk, depths are 16-bit single-channel
rasters in integer millimeters (scale 0.001 m per unit).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import cv2
import numpy as np

DEPTH_SCALE = 0.001  # meters per stored 16-bit unit (millimeter convention)

NYU_DOWNSAMPLE = 2
NYU_CROP_HEIGHT = 228
NYU_CROP_WIDTH = 304
NYU_DEPTH_CAP = 10.0


class DepthFormatError(ValueError):
    """Raised when a raster does not have the expected layout."""


class DepthRangeError(ValueError):
    """Raised when depth values cannot be represented in 16 bits."""


class CropSizeError(ValueError):
    """Raised when an input is too small for the requested crop."""


def valid_mask(depth: np.ndarray) -> np.ndarray:
    """Boolean mask of measured pixels (depth > 0)."""
    return depth > 0


def decode_depth(raw: np.ndarray, scale: float = DEPTH_SCALE) -> np.ndarray:
    """Convert a 16-bit single-channel raster to metric depth in meters.

    Raw value 0 stays 0.0 and means "no measurement".
    """
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    if raw.ndim == 3 and raw.shape[2] == 1:
        raw = raw[:, :, 0]
    if raw.ndim != 2:
        raise DepthFormatError(f"expected single-channel raster, got shape {raw.shape}")
    return raw.astype(np.float32) * np.float32(scale)


def encode_depth(depth: np.ndarray, scale: float = DEPTH_SCALE) -> np.ndarray:
    """Quantize metric depth to a 16-bit raster, rounding to nearest unit.

    Invalid pixels (0.0) stay exactly 0. Values that would exceed the 16-bit
    range raise DepthRangeError.
    """
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    if depth.ndim != 2:
        raise DepthFormatError(f"expected 2-d depth map, got shape {depth.shape}")
    if not np.all(np.isfinite(depth)) or np.any(depth < 0):
        raise DepthRangeError("depth map contains negative or non-finite values")
    units = np.round(depth.astype(np.float64) / scale)
    if units.max(initial=0.0) > np.iinfo(np.uint16).max:
        raise DepthRangeError(
            f"depth {depth.max():.4f} m exceeds 16-bit range at scale {scale}"
        )
    return units.astype(np.uint16)


def read_depth(path: str | os.PathLike, scale: float = DEPTH_SCALE) -> np.ndarray:
    raw = cv2.imread(os.fspath(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FileNotFoundError(f"cannot read depth raster: {path}")
    return decode_depth(np.asarray(raw), scale)


def write_depth(path: str | os.PathLike, depth: np.ndarray, scale: float = DEPTH_SCALE) -> None:
    if not cv2.imwrite(os.fspath(path), encode_depth(depth, scale)):
        raise IOError(f"cannot write depth raster: {path}")


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit RGB raster as float32 in [0, 1], shape (H, W, 3)."""
    bgr = cv2.imread(os.fspath(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise FileNotFoundError(f"cannot read image: {path}")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a float image in [0, 1] (grayscale or RGB) as an 8-bit raster."""
    arr = np.clip(image, 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8)
    if arr.ndim == 3:
        arr = cv2.cvtColor(arr, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(os.fspath(path), arr):
        raise IOError(f"cannot write image: {path}")


@dataclass
class Sample:
    """An RGB image with its sparse input depth and dense ground truth."""

    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    sparse: np.ndarray  # (H, W) float32 meters, 0 = invalid
    gt: np.ndarray  # (H, W) float32 meters, 0 = invalid
    id: str = ""

    def __post_init__(self):
        if self.image.shape[:2] != self.gt.shape or self.sparse.shape != self.gt.shape:
            raise ValueError(
                f"sample '{self.id}': mismatched shapes image={self.image.shape} "
                f"sparse={self.sparse.shape} gt={self.gt.shape}"
            )


def downsample_depth_valid(depth: np.ndarray, factor: int) -> np.ndarray:
    """Downsample a depth map by averaging only the valid pixels per window.

    An output pixel is invalid (0) iff its factor x factor source window holds
    no valid pixel. Edges are handled by zero padding, so output size is
    ceil(input / factor).
    """
    if factor == 1:
        return depth.copy()
    h, w = depth.shape
    oh, ow = -(-h // factor), -(-w // factor)
    padded = np.zeros((oh * factor, ow * factor), dtype=np.float64)
    padded[:h, :w] = depth
    windows = padded.reshape(oh, factor, ow, factor)
    mask = windows > 0
    counts = mask.sum(axis=(1, 3))
    sums = np.where(mask, windows, 0.0).sum(axis=(1, 3))
    out = np.zeros((oh, ow), dtype=np.float64)
    np.divide(sums, counts, out=out, where=counts > 0)
    return out.astype(np.float32)


def downsample_image(image: np.ndarray, factor: int) -> np.ndarray:
    """Area-average downsample of an RGB image; output size ceil(input / factor)."""
    if factor == 1:
        return image.copy()
    h, w = image.shape[:2]
    oh, ow = -(-h // factor), -(-w // factor)
    # replicate-pad the border so partial windows average real content
    padded = np.pad(
        image, ((0, oh * factor - h), (0, ow * factor - w), (0, 0)), mode="edge"
    )
    return (
        padded.reshape(oh, factor, ow, factor, 3)
        .mean(axis=(1, 3))
        .astype(np.float32)
    )


def center_crop(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = arr.shape[:2]
    if h < height or w < width:
        raise CropSizeError(f"input {h}x{w} smaller than crop {height}x{width}")
    top = (h - height) // 2
    left = (w - width) // 2
    return arr[top : top + height, left : left + width].copy()


def preprocess_nyu(sample: Sample, depth_cap: float = NYU_DEPTH_CAP) -> Sample:
    """NYU-style preprocessing: halve the resolution, center-crop to 304x228,
    and clamp ground-truth depth to the dataset cap.

    Depth downsampling is validity-aware so an output pixel is invalid only
    when its whole source window is.
    """
    image = downsample_image(sample.image, NYU_DOWNSAMPLE)
    gt = downsample_depth_valid(sample.gt, NYU_DOWNSAMPLE)
    sparse = downsample_depth_valid(sample.sparse, NYU_DOWNSAMPLE)

    image = center_crop(image, NYU_CROP_HEIGHT, NYU_CROP_WIDTH)
    gt = center_crop(gt, NYU_CROP_HEIGHT, NYU_CROP_WIDTH)
    sparse = center_crop(sparse, NYU_CROP_HEIGHT, NYU_CROP_WIDTH)

    gt = np.minimum(gt, depth_cap)
    sparse = np.minimum(sparse, depth_cap)
    return Sample(image=image, sparse=sparse, gt=gt, id=sample.id)


@dataclass
class ManifestEntry:
    image_path: str
    depth_path: str
    split: str
    id: str = ""


def write_manifest(path: str | os.PathLike, entries: list[ManifestEntry]) -> None:
    """Write a dataset manifest: one tab-separated (image, depth, split) per line."""
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(f"{e.image_path}\t{e.depth_path}\t{e.split}\n")


def read_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    entries = []
    root = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DepthFormatError(
                    f"{path}:{lineno + 1}: expected 3 tab-separated fields, got {len(parts)}"
                )
            image_path, depth_path, split = parts
            if not os.path.isabs(image_path):
                image_path = os.path.join(root, image_path)
            if not os.path.isabs(depth_path):
                depth_path = os.path.join(root, depth_path)
            stem = os.path.splitext(os.path.basename(depth_path))[0]
            entries.append(
                ManifestEntry(image_path, depth_path, split, id=f"{stem}#{lineno}")
            )
    return entries


class ManifestDataset:
    """Samples listed in a manifest file, optionally filtered by split.

    Loading is a pure function of the entry, so instances are safe to read
    from multiple workers.
    """

    def __init__(
        self,
        manifest_path: str,
        split: str | None = None,
        depth_scale: float = DEPTH_SCALE,
        preprocess: str = "none",
        depth_cap: float = NYU_DEPTH_CAP,
    ):
        if preprocess not in ("none", "nyu"):
            raise ValueError(f"unknown preprocess mode: {preprocess!r}")
        self.entries = [
            e for e in read_manifest(manifest_path) if split is None or e.split == split
        ]
        self.depth_scale = depth_scale
        self.preprocess = preprocess
        self.depth_cap = depth_cap

    def __len__(self) -> int:
        return len(self.entries)

    def load(self, index: int) -> Sample:
        e = self.entries[index]
        image = read_image(e.image_path)
        gt = read_depth(e.depth_path, self.depth_scale)
        sample = Sample(
            image=image, sparse=np.zeros_like(gt), gt=gt, id=e.id
        )
        if self.preprocess == "nyu":
            sample = preprocess_nyu(sample, self.depth_cap)
        else:
            sample = replace(sample, gt=np.minimum(sample.gt, self.depth_cap))
        return sample

    def __getitem__(self, index: int) -> Sample:
        return self.load(index)
