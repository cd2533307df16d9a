"""Fold the voxel feature volume into BEV / RV maps and pool around attention."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np

from .ndcore import DimensionError, Tensor, add, avg_pool2d, fold_axis_into_channels, permute, reshape, unpool_broadcast

BEV = "bev"
RV = "rv"

# spatial axis of the C x Nx x Ny x Nz volume folded into channels per view
FOLDED_AXIS = {BEV: 3, RV: 2}

PAPER_KERNELS = {BEV: (4, 4), RV: (4, 1)}


@dataclass
class ViewMap:
    view: str
    features: Tensor  # C' x S1 x S2
    folded_axis: int
    channel_layout: Tuple[int, int]  # (C, folded extent); (C', 1) once channels are mixed
    kernel: Tuple[int, int] = (1, 1)  # pooling kernel already applied

    @property
    def spatial(self) -> Tuple[int, int]:
        return self.features.shape[1], self.features.shape[2]

    @property
    def channels(self) -> int:
        return self.features.shape[0]

    def sequence(self) -> Tensor:
        """Spatially flattened cells as rows: (S1*S2) x C'."""
        c, s1, s2 = self.features.shape
        return permute(reshape(self.features, (c, s1 * s2)), (1, 0))


def _check_view(view: str) -> None:
    if view not in FOLDED_AXIS:
        raise ValueError(f"unknown view {view!r}; expected 'bev' or 'rv'")


def collapse(f3d: Tensor, view: str) -> ViewMap:
    """BEV folds the vertical axis (Nx x Ny map); RV folds the y axis (Nx x Nz map)."""
    _check_view(view)
    if f3d.data.ndim != 4:
        raise DimensionError(f"collapse expects a rank-4 C x Nx x Ny x Nz volume, got rank {f3d.data.ndim}")
    axis = FOLDED_AXIS[view]
    folded = fold_axis_into_channels(f3d, axis)
    return ViewMap(view, folded, axis, (f3d.shape[0], f3d.shape[axis]))


def uncollapse(v: ViewMap) -> Tensor:
    """Inverse of :func:`collapse`."""
    c, k = v.channel_layout
    s1, s2 = v.spatial
    moved = reshape(v.features, (c, k, s1, s2))
    if v.folded_axis == 3:
        return permute(moved, (0, 2, 3, 1))
    return permute(moved, (0, 2, 1, 3))


def view_shape(grid_shape: Tuple[int, int, int], channels: int, view: str) -> Tuple[int, int, int]:
    """(C', S1, S2) of a collapsed view, computed without allocating anything."""
    _check_view(view)
    nx, ny, nz = grid_shape
    if view == BEV:
        return channels * nz, nx, ny
    return channels * ny, nx, nz


def pooled_extent(spatial: Tuple[int, int], kernel: Tuple[int, int]) -> Tuple[int, int]:
    return -(-spatial[0] // kernel[0]), -(-spatial[1] // kernel[1])


def pool_for_attention(v: ViewMap, kernel: Tuple[int, int] = None) -> ViewMap:
    kernel = tuple(kernel) if kernel is not None else PAPER_KERNELS[v.view]
    pooled = avg_pool2d(v.features, *kernel)
    return replace(v, features=pooled, kernel=kernel)


def scatter_back(fused_pooled: ViewMap, original: ViewMap) -> ViewMap:
    """Broadcast pooled fused features over their windows and add them onto ``original``."""
    if fused_pooled.channels != original.channels:
        raise DimensionError(
            f"fused features have {fused_pooled.channels} channels, original map has {original.channels}"
        )
    kh, kw = fused_pooled.kernel
    h, w = original.spatial
    up = unpool_broadcast(fused_pooled.features, kh, kw, h, w)
    return replace(original, features=add(original.features, up))


def cell_centers(x_range, second_range, res_first: float, res_second: float, spatial, kernel) -> np.ndarray:
    """Metric centers of pooled cells, row-major, averaged over each window's valid cells."""
    s1, s2 = spatial
    a = x_range[0] + (np.arange(s1) + 0.5) * res_first
    b = second_range[0] + (np.arange(s2) + 0.5) * res_second
    out = []
    for axis_vals, k in ((a, kernel[0]), (b, kernel[1])):
        out.append(np.array([axis_vals[i:i + k].mean() for i in range(0, len(axis_vals), k)]))
    ga, gb = np.meshgrid(out[0], out[1], indexing="ij")
    return np.stack([ga.ravel(), gb.ravel()], axis=1)


def cell_bounds(lo: float, res: float, n: int, k: int) -> np.ndarray:
    """(start, stop) metric interval of each pooled window along one axis."""
    starts = np.arange(0, n, k)
    stops = np.minimum(starts + k, n)
    return np.stack([lo + starts * res, lo + stops * res], axis=1)
