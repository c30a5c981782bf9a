"""Procedural test scenes: shaded planes with spheres, plus a tiny dataset writer.

Scenes are simple enough to memorize quickly (smooth depth, few objects) but
have real structure: a slanted background plane, a few sphere caps bulging
toward the camera, and diffuse shading that ties image intensity to surface
orientation. Used by the overfit experiment and the demos.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .depthio import ManifestEntry, write_depth, write_image, write_manifest

SCENE_HEIGHT = 48
SCENE_WIDTH = 64
_LIGHT = np.array([0.3, -0.5, 0.8])
_MIN_DEPTH = 0.3


def _shade(normals: np.ndarray) -> np.ndarray:
    light = _LIGHT / np.linalg.norm(_LIGHT)
    lambert = normals @ light
    return np.clip(lambert, 0.15, 1.0)


def render_scene(
    height: int = SCENE_HEIGHT, width: int = SCENE_WIDTH, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Render one scene; returns (rgb float32 HxWx3 in [0, 1], depth float32 HxW meters)."""
    rng = np.random.default_rng(seed)
    ys, xs = np.meshgrid(
        np.arange(height) / height - 0.5,
        np.arange(width) / width - 0.5,
        indexing="ij",
    )
    z0 = rng.uniform(2.0, 4.0)
    slope_x, slope_y = rng.uniform(-1.0, 1.0, size=2)
    depth = z0 + slope_x * xs + slope_y * ys
    plane_normal = np.array([-slope_x, -slope_y, 1.0])
    plane_normal /= np.linalg.norm(plane_normal)
    normals = np.broadcast_to(plane_normal, (height, width, 3)).copy()
    albedo = np.empty((height, width, 3))
    base = rng.uniform(0.3, 0.9, size=3)
    tint = rng.uniform(-0.2, 0.2, size=3)
    albedo[:] = base + tint * (xs + ys)[..., None]

    py, px = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    for _ in range(rng.integers(1, 3)):
        max_radius = min(height, width) / 3.5
        radius = rng.uniform(min(6.0, max_radius / 2), max_radius)
        cy = rng.uniform(radius, height - radius)
        cx = rng.uniform(radius, width - radius)
        bump = rng.uniform(0.3, 0.8)
        rho2 = ((px - cx) ** 2 + (py - cy) ** 2) / radius**2
        inside = rho2 < 1.0
        cap = np.sqrt(np.clip(1.0 - rho2, 0.0, None))
        plane_at_center = depth[int(cy), int(cx)]
        z = plane_at_center - 0.1 - bump * cap
        front = inside & (z < depth)
        depth = np.where(front, z, depth)
        sphere_n = np.stack(
            [(px - cx) / radius, (py - cy) / radius, cap], axis=-1
        )
        normals = np.where(front[..., None], sphere_n, normals)
        color = rng.uniform(0.2, 0.95, size=3)
        albedo = np.where(front[..., None], color, albedo)

    depth = np.clip(depth, _MIN_DEPTH, 9.5).astype(np.float32)
    image = np.clip(albedo * _shade(normals)[..., None], 0.0, 1.0)
    return image.astype(np.float32), depth


def write_demo_dataset(
    root: str | Path,
    count: int = 8,
    val_count: int = 0,
    height: int = SCENE_HEIGHT,
    width: int = SCENE_WIDTH,
    seed: int = 0,
) -> Path:
    """Write rendered scenes and a manifest under ``root``; returns the manifest path."""
    if count < 1 or val_count < 0:
        raise ValueError(f"need count >= 1 and val_count >= 0, got {count}/{val_count}")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count + val_count):
        name = f"scene_{i:03d}.png"
        image, depth = render_scene(height, width, seed=seed + i)
        write_image(root / "images" / name, image)
        write_depth(root / "depth" / name, depth)
        split = "train" if i < count else "val"
        entries.append(
            ManifestEntry(
                image_path=f"images/{name}", depth_path=f"depth/{name}", split=split
            )
        )
    manifest = root / "manifest.tsv"
    write_manifest(manifest, entries)
    return manifest
