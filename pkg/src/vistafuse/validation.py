"""Input validation shared by the estimator and the command line."""

from __future__ import annotations

from typing import Iterable, List, Sequence, Union

import numpy as np
from sklearn.utils import check_array

from .harness.scenes import SceneSample
from .losses import BoxFootprint
from .voxelizer import PointCloud, VoxelConfig

CloudLike = Union[PointCloud, np.ndarray, Sequence[Sequence[float]]]


def check_point_cloud(cloud: CloudLike) -> PointCloud:
    """Return a ``PointCloud`` from an ``(n, 4)`` array-like of ``x, y, z, intensity``."""
    if isinstance(cloud, PointCloud):
        return cloud
    arr = check_array(
        cloud, dtype=np.float64, ensure_2d=True, ensure_min_samples=0, ensure_all_finite=True, input_name="cloud"
    )
    if arr.shape[1] != 4:
        raise ValueError(f"point clouds need 4 columns (x, y, z, intensity), got {arr.shape[1]}")
    return PointCloud(arr)


def check_boxes(boxes: Iterable) -> List[BoxFootprint]:
    """Accept ``BoxFootprint`` objects or ``(w, h, x, y, class_id)`` rows."""
    out = []
    for b in boxes if boxes is not None else []:
        if isinstance(b, BoxFootprint):
            out.append(b)
            continue
        row = list(b)
        if len(row) != 5:
            raise ValueError(f"box rows are (w, h, x, y, class_id), got {row!r}")
        cid = row[4]
        if float(cid) != int(cid):
            raise ValueError(f"class_id must be an integer, got {cid!r}")
        out.append(BoxFootprint(float(row[0]), float(row[1]), float(row[2]), float(row[3]), int(cid)))
    return out


def check_boxes_in_range(boxes: Sequence[BoxFootprint], cfg: VoxelConfig) -> None:
    for i, b in enumerate(boxes):
        if (b.x - b.w / 2 < cfg.x_range[0] or b.x + b.w / 2 > cfg.x_range[1]
                or b.y - b.h / 2 < cfg.y_range[0] or b.y + b.h / 2 > cfg.y_range[1]):
            raise ValueError(f"box {i} ({b}) leaves the voxel range")


def check_class_ids(boxes: Sequence[BoxFootprint], n_classes: int) -> None:
    bad = [b.class_id for b in boxes if not 0 <= b.class_id < n_classes]
    if bad:
        raise ValueError(f"class ids {sorted(set(bad))} outside [0, {n_classes})")


def check_scene(scene, boxes=None) -> SceneSample:
    """Normalize a scene given as ``SceneSample``, ``(cloud, boxes)`` or a bare cloud."""
    if isinstance(scene, SceneSample):
        if boxes is not None:
            return SceneSample(scene.cloud, check_boxes(boxes), scene.seed, scene.n_background)
        return scene
    if isinstance(scene, tuple) and len(scene) == 2 and boxes is None:
        scene, boxes = scene
    return SceneSample(check_point_cloud(scene), check_boxes(boxes))


def check_scenes(X, y=None) -> List[SceneSample]:
    if isinstance(X, (SceneSample, PointCloud, np.ndarray)):
        raise TypeError("expected a sequence of scenes, got a single scene")
    X = list(X)
    if y is not None:
        y = list(y)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} scenes but {len(y)} box lists")
        return [check_scene(s, b) for s, b in zip(X, y)]
    return [check_scene(s) for s in X]
