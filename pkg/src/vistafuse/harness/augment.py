"""Scene-level augmentation: flips, rotation about z, scaling and translation."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from ..losses import BoxFootprint
from ..voxelizer import PointCloud
from .scenes import SceneSample

ROTATION_RANGE = 0.3925
SCALE_RANGE = (0.95, 1.05)
TRANSLATION_RANGE = (0.2, 0.2, 0.2)


@dataclass(frozen=True)
class AugmentParams:
    flip_x: bool = False
    flip_y: bool = False
    angle: float = 0.0
    scale: float = 1.0
    translation: tuple = (0.0, 0.0, 0.0)


def draw_params(rng: np.random.Generator) -> AugmentParams:
    t = tuple(float(rng.uniform(-r, r)) for r in TRANSLATION_RANGE)
    return AugmentParams(
        flip_x=bool(rng.uniform() < 0.5),
        flip_y=bool(rng.uniform() < 0.5),
        angle=float(rng.uniform(-ROTATION_RANGE, ROTATION_RANGE)),
        scale=float(rng.uniform(*SCALE_RANGE)),
        translation=t,
    )


def _transform_box(b: BoxFootprint, p: AugmentParams) -> BoxFootprint:
    x, y, w, h = b.x, b.y, b.w, b.h
    if p.flip_x:
        x = -x
    if p.flip_y:
        y = -y
    if p.angle:
        c, s = np.cos(p.angle), np.sin(p.angle)
        x, y = c * x - s * y, s * x + c * y
        # axis-aligned rectangle enclosing the rotated footprint
        w, h = abs(c) * b.w + abs(s) * b.h, abs(s) * b.w + abs(c) * b.h
    return BoxFootprint(
        float(w * p.scale),
        float(h * p.scale),
        float(x * p.scale + p.translation[0]),
        float(y * p.scale + p.translation[1]),
        b.class_id,
    )


def apply_augmentation(s: SceneSample, p: AugmentParams) -> SceneSample:
    pts = s.cloud.points.copy()
    if p.flip_x:
        pts[:, 0] = -pts[:, 0]
    if p.flip_y:
        pts[:, 1] = -pts[:, 1]
    if p.angle:
        c, sn = np.cos(p.angle), np.sin(p.angle)
        x, y = pts[:, 0].copy(), pts[:, 1].copy()
        pts[:, 0] = c * x - sn * y
        pts[:, 1] = sn * x + c * y
    if p.scale != 1.0:
        pts[:, :3] *= p.scale
    if any(p.translation):
        pts[:, :3] += np.asarray(p.translation)
    boxes = [_transform_box(b, p) for b in s.boxes]
    return replace(s, cloud=PointCloud(pts), boxes=boxes)


def augment(s: SceneSample, seed: int) -> SceneSample:
    return apply_augmentation(s, draw_params(np.random.default_rng(seed)))


def transform_points(points: Sequence, p: AugmentParams) -> np.ndarray:
    """Apply ``p`` to bare (n, 4) points; used by tests and tooling."""
    return apply_augmentation(SceneSample(PointCloud(np.asarray(points))), p).cloud.points
