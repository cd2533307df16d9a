"""Text formats: ``x,y,z,intensity`` point files and ``w,h,x,y,class_id`` box sidecars."""

from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from ..losses import BoxFootprint
from ..voxelizer import PointCloud
from .scenes import SceneSample

PathLike = Union[str, Path]
CLOUD_SUFFIX = ".pts"
BOX_SUFFIX = ".boxes"


class FormatError(ValueError):
    """A text file does not follow the expected line format."""


def _rows(path: PathLike, width: int) -> List[List[str]]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != width:
            raise FormatError(f"{path}:{lineno}: expected {width} comma-separated fields, got {len(parts)}")
        rows.append(parts)
    return rows


def read_cloud(path: PathLike) -> PointCloud:
    try:
        data = [[float(v) for v in row] for row in _rows(path, 4)]
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: {exc}") from None
    arr = np.array(data, dtype=np.float64).reshape(-1, 4)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: non-finite coordinate")
    return PointCloud(arr)


def write_cloud(path: PathLike, cloud: PointCloud) -> None:
    lines = ["# x,y,z,intensity"]
    lines += [",".join(repr(float(v)) for v in row) for row in cloud.points]
    Path(path).write_text("\n".join(lines) + "\n")


def read_boxes(path: PathLike) -> List[BoxFootprint]:
    boxes = []
    for row in _rows(path, 5):
        try:
            w, h, x, y = (float(v) for v in row[:4])
            boxes.append(BoxFootprint(w, h, x, y, int(row[4])))
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from None
    return boxes


def write_boxes(path: PathLike, boxes: List[BoxFootprint]) -> None:
    lines = ["# w,h,x,y,class_id"]
    lines += [f"{b.w!r},{b.h!r},{b.x!r},{b.y!r},{b.class_id}" for b in boxes]
    Path(path).write_text("\n".join(lines) + "\n")


def sidecar_path(cloud_path: PathLike) -> Path:
    return Path(cloud_path).with_suffix(BOX_SUFFIX)


def write_scene(directory: PathLike, name: str, scene: SceneSample) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cloud_path = directory / f"{name}{CLOUD_SUFFIX}"
    write_cloud(cloud_path, scene.cloud)
    write_boxes(sidecar_path(cloud_path), scene.boxes)
    return cloud_path


def read_scene(cloud_path: PathLike, boxes_path: Optional[PathLike] = None) -> SceneSample:
    """Read a point file plus its box sidecar (missing sidecar means no boxes)."""
    cloud = read_cloud(cloud_path)
    boxes_path = Path(boxes_path) if boxes_path else sidecar_path(cloud_path)
    boxes = read_boxes(boxes_path) if boxes_path.exists() else []
    return SceneSample(cloud, boxes)


def read_scene_dir(directory: PathLike) -> List[SceneSample]:
    paths = sorted(Path(directory).glob(f"*{CLOUD_SUFFIX}"))
    if not paths:
        raise FormatError(f"no *{CLOUD_SUFFIX} scene files in {directory}")
    return [read_scene(p) for p in paths]
