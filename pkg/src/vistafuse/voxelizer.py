"""Point cloud binning, pillar centers and the stand-in voxel encoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .ndcore import DimensionError, Tensor, conv1d_pointwise, relu, reshape

Range = Tuple[float, float]


@dataclass(frozen=True)
class VoxelConfig:
    x_range: Range
    y_range: Range
    z_range: Range
    resolution: Tuple[float, float, float]

    def __post_init__(self):
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise ValueError(f"{name}: max must exceed min, got ({lo}, {hi})")
        if len(self.resolution) != 3 or any(not r > 0 for r in self.resolution):
            raise ValueError(f"resolution must be three positive sizes, got {self.resolution}")
        if min(self.grid_shape) < 1:
            raise ValueError(f"grid extents must be >= 1, got {self.grid_shape}")

    @property
    def mins(self) -> np.ndarray:
        return np.array([self.x_range[0], self.y_range[0], self.z_range[0]])

    @property
    def maxs(self) -> np.ndarray:
        return np.array([self.x_range[1], self.y_range[1], self.z_range[1]])

    @property
    def grid_shape(self) -> Tuple[int, int, int]:
        spans = (self.x_range, self.y_range, self.z_range)
        return tuple(int(round((hi - lo) / r)) for (lo, hi), r in zip(spans, self.resolution))


def desk_config() -> VoxelConfig:
    """16 m x 16 m x 4 m at 0.25 m -> 64 x 64 x 16 voxels."""
    return VoxelConfig((-8.0, 8.0), (-8.0, 8.0), (-1.0, 3.0), (0.25, 0.25, 0.25))


@dataclass
class PointCloud:
    """Rows of (x, y, z, intensity)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = np.zeros((0, 4))
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"points must be an (n, 4) array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class SparseVoxels:
    """Occupied voxels only: integer indices, counts and mean features."""

    config: VoxelConfig
    indices: np.ndarray  # (k, 3) int
    counts: np.ndarray  # (k,)
    means: np.ndarray  # (k, 4)

    @property
    def n_points(self) -> int:
        return int(self.counts.sum())


@dataclass
class VoxelGrid:
    config: VoxelConfig
    mean_feature: Tensor  # 4 x Nx x Ny x Nz
    count: Tensor  # 1 x Nx x Ny x Nz

    @property
    def n_points(self) -> int:
        return int(self.count.data.sum())


@dataclass
class PillarCenters:
    centers: np.ndarray  # (Nx*Ny, 2), row-major over (x index, y index)

    def __len__(self) -> int:
        return len(self.centers)


def voxel_indices(points: np.ndarray, cfg: VoxelConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Integer voxel index per point plus the in-range mask (half-open bins)."""
    xyz = np.asarray(points, dtype=np.float64)[:, :3]
    res = np.asarray(cfg.resolution, dtype=np.float64)
    idx = np.floor((xyz - cfg.mins) / res).astype(np.int64)
    inside = np.all((xyz >= cfg.mins) & (xyz < cfg.maxs), axis=1)
    # rounding can push a point just under max into the bin past the grid
    inside &= np.all((idx >= 0) & (idx < np.array(cfg.grid_shape)), axis=1)
    return idx, inside


def bin_points(cloud: PointCloud, cfg: VoxelConfig) -> SparseVoxels:
    """Bin in-range points and average their features per occupied voxel.

    Features are the point offset from the voxel center (x, y, z) and the
    intensity. Accumulation runs in point order.
    """
    pts = cloud.points
    idx, inside = voxel_indices(pts, cfg)
    pts, idx = pts[inside], idx[inside]
    if len(pts) == 0:
        return SparseVoxels(cfg, np.zeros((0, 3), np.int64), np.zeros(0), np.zeros((0, 4)))
    res = np.asarray(cfg.resolution)
    centers = cfg.mins + (idx + 0.5) * res
    feats = np.concatenate([pts[:, :3] - centers, pts[:, 3:4]], axis=1)

    nx, ny, nz = cfg.grid_shape
    flat = (idx[:, 0] * ny + idx[:, 1]) * nz + idx[:, 2]
    keys, inverse = np.unique(flat, return_inverse=True)
    counts = np.bincount(inverse, minlength=len(keys)).astype(np.float64)
    sums = np.zeros((len(keys), 4))
    np.add.at(sums, inverse, feats)
    ix, rem = np.divmod(keys, ny * nz)
    iy, iz = np.divmod(rem, nz)
    return SparseVoxels(cfg, np.stack([ix, iy, iz], axis=1), counts, sums / counts[:, None])


def densify(sparse: SparseVoxels) -> VoxelGrid:
    nx, ny, nz = sparse.config.grid_shape
    feat = np.zeros((4, nx, ny, nz))
    count = np.zeros((1, nx, ny, nz))
    ix, iy, iz = sparse.indices.T
    feat[:, ix, iy, iz] = sparse.means.T
    count[0, ix, iy, iz] = sparse.counts
    return VoxelGrid(sparse.config, Tensor(feat), Tensor(count))


def voxelize(cloud: PointCloud, cfg: VoxelConfig) -> VoxelGrid:
    return densify(bin_points(cloud, cfg))


def pillar_centers(cfg: VoxelConfig) -> PillarCenters:
    nx, ny, _ = cfg.grid_shape
    rx, ry, _ = cfg.resolution
    xs = cfg.x_range[0] + (np.arange(nx) + 0.5) * rx
    ys = cfg.y_range[0] + (np.arange(ny) + 0.5) * ry
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return PillarCenters(np.stack([gx.ravel(), gy.ravel()], axis=1))


# ---------------------------------------------------------------------------
# stand-in 3D backbone
# ---------------------------------------------------------------------------


@dataclass
class EncoderWeights:
    w1: Tensor  # C x 4
    b1: Tensor  # C
    w2: Tensor  # C x C
    b2: Tensor  # C

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int = 16) -> "EncoderWeights":
        return cls(
            Tensor(rng.normal(0.0, np.sqrt(2.0 / 4), (channels, 4)), requires_grad=True),
            Tensor(np.full(channels, 0.0), requires_grad=True),
            Tensor(rng.normal(0.0, np.sqrt(2.0 / channels), (channels, channels)), requires_grad=True),
            Tensor(np.full(channels, 0.0), requires_grad=True),
        )


def encode_features(grid: VoxelGrid, weights: EncoderWeights) -> Tensor:
    """Two pointwise linear + ReLU layers applied to every voxel -> C x Nx x Ny x Nz."""
    if weights.w1.shape[1] != 4:
        raise DimensionError(f"first encoder layer must take 4 inputs, got {weights.w1.shape}")
    if weights.w2.shape[1] != weights.w1.shape[0]:
        raise DimensionError("encoder layer widths do not chain")
    _, nx, ny, nz = grid.mean_feature.shape
    x = reshape(grid.mean_feature, (4, nx * ny * nz))
    h = relu(conv1d_pointwise(x, weights.w1, weights.b1))
    h = relu(conv1d_pointwise(h, weights.w2, weights.b2))
    return reshape(h, (weights.w2.shape[0], nx, ny, nz))
