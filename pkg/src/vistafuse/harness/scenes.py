"""Synthetic LiDAR-like scenes: a noisy ground plane, clutter and box-shaped objects."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np

from ..losses import BoxFootprint
from ..voxelizer import PointCloud, VoxelConfig

# class id -> (length range, width range, height, intensity range, surface points)
# classes 0 and 1 overlap in footprint size and differ mainly in height and
# reflectivity; class 2 is pedestrian-sized
CLASS_PROFILES = {
    0: ((3.8, 4.8), (1.7, 2.0), 1.5, (0.50, 0.65), 55),
    1: ((4.3, 5.3), (1.9, 2.2), 2.1, (0.75, 0.90), 65),
    2: ((0.5, 0.9), (0.5, 0.9), 1.75, (0.30, 0.45), 45),
}
N_CLASSES = len(CLASS_PROFILES)
N_GROUND = 4000
N_CLUTTER = 80
PLACEMENT_MARGIN = 3.0
MAX_OBJECT_FRACTION = 0.10


@dataclass
class SceneSample:
    cloud: PointCloud
    boxes: List[BoxFootprint] = field(default_factory=list)
    seed: int = 0
    n_background: int = 0

    @property
    def background_fraction(self) -> float:
        return self.n_background / max(len(self.cloud), 1)


def ground_height(cfg: VoxelConfig) -> float:
    return min(cfg.z_range[0] + 0.5, 0.5 * (cfg.z_range[0] + cfg.z_range[1]))


def _overlaps(a: BoxFootprint, b: BoxFootprint, gap: float = 0.5) -> bool:
    return abs(a.x - b.x) * 2 < a.w + b.w + 2 * gap and abs(a.y - b.y) * 2 < a.h + b.h + 2 * gap


def _surface_points(rng, box: BoxFootprint, z0: float, height: float, n: int, intensity) -> np.ndarray:
    """Points on the four vertical faces and the roof of a box."""
    x0, x1 = box.x - box.w / 2, box.x + box.w / 2
    y0, y1 = box.y - box.h / 2, box.y + box.h / 2
    face = rng.integers(0, 5, n)  # 0/1: x = const, 2/3: y = const, 4: roof
    u, v, r = rng.uniform(0.0, 1.0, (3, n))
    x = np.select([face == 0, face == 1], [x0, x1], x0 + u * box.w)
    y = np.select([face == 2, face == 3, face == 4], [y0, y1, y0 + r * box.h], y0 + u * box.h)
    z = np.where(face == 4, z0 + height, z0 + v * height)
    inten = rng.uniform(*intensity, n)
    return np.stack([x, y, z, inten], axis=1)


def generate_scene(seed: int, n_objects: int, cfg: VoxelConfig) -> SceneSample:
    """Deterministic scene for ``seed``; objects never overlap and stay clear of the range edges."""
    rng = np.random.default_rng(seed)
    (xlo, xhi), (ylo, yhi) = cfg.x_range, cfg.y_range
    z0 = ground_height(cfg)

    boxes: List[BoxFootprint] = []
    heights = []
    attempts = 0
    while len(boxes) < n_objects and attempts < 200 * max(n_objects, 1):
        attempts += 1
        cid = int(rng.integers(0, N_CLASSES))
        (l_lo, l_hi), (w_lo, w_hi), height, _, _ = CLASS_PROFILES[cid]
        length, width = rng.uniform(l_lo, l_hi), rng.uniform(w_lo, w_hi)
        if rng.uniform() < 0.5:
            length, width = width, length
        cx = rng.uniform(xlo + PLACEMENT_MARGIN, xhi - PLACEMENT_MARGIN)
        cy = rng.uniform(ylo + PLACEMENT_MARGIN, yhi - PLACEMENT_MARGIN)
        cand = BoxFootprint(float(length), float(width), float(cx), float(cy), cid)
        if any(_overlaps(cand, b) for b in boxes):
            continue
        boxes.append(cand)
        heights.append(height)

    ground = np.stack(
        [
            rng.uniform(xlo, xhi, N_GROUND),
            rng.uniform(ylo, yhi, N_GROUND),
            z0 + rng.normal(0.0, 0.03, N_GROUND),
            rng.uniform(0.05, 0.25, N_GROUND),
        ],
        axis=1,
    )
    # objects occlude the ground beneath them
    hidden = np.zeros(len(ground), dtype=bool)
    for b in boxes:
        hidden |= b.contains(ground[:, 0], ground[:, 1])
    ground = ground[~hidden]
    clutter = np.stack(
        [
            rng.uniform(xlo, xhi, N_CLUTTER),
            rng.uniform(ylo, yhi, N_CLUTTER),
            rng.uniform(z0, cfg.z_range[1], N_CLUTTER),
            rng.uniform(0.0, 1.0, N_CLUTTER),
        ],
        axis=1,
    )
    background = np.concatenate([ground, clutter])

    parts = []
    for b, height in zip(boxes, heights):
        _, _, _, inten, n_pts = CLASS_PROFILES[b.class_id]
        parts.append(_surface_points(rng, b, z0, height, n_pts, inten))
    objects = np.concatenate(parts) if parts else np.zeros((0, 4))
    budget = int(MAX_OBJECT_FRACTION / (1 - MAX_OBJECT_FRACTION) * len(background))
    if len(objects) > budget:
        objects = objects[np.sort(rng.choice(len(objects), budget, replace=False))]

    points = np.concatenate([background, objects])
    return SceneSample(PointCloud(points), boxes, seed, len(background))


def generate_scenes(seed: int, n_scenes: int, cfg: VoxelConfig, n_objects=(2, 5)) -> List[SceneSample]:
    """``n_scenes`` scenes with per-scene seeds drawn from ``seed``; object counts uniform in ``n_objects``."""
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31 - 1, n_scenes)
    counts = rng.integers(n_objects[0], n_objects[1] + 1, n_scenes)
    return [generate_scene(int(s), int(c), cfg) for s, c in zip(seeds, counts)]
