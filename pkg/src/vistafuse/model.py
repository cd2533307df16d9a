"""End-to-end network: voxel encoder, per-view necks, fusion and dense heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Tuple

import numpy as np

from .ndcore import Tensor, conv1d_pointwise, conv2d, instance_norm, relu, reshape, transpose
from .projection import BEV, RV, ViewMap, cell_bounds, cell_centers, collapse, view_shape
from .vista import MODES, Affine, AttentionBundle, VistaWeights, vista_forward
from .voxelizer import EncoderWeights, PillarCenters, VoxelConfig, VoxelGrid, encode_features

N_REG = 4  # dx, dy, log w, log h


@dataclass
class ModelConfig:
    channels: int = 16
    d_f: int = 32
    d_q: int = 32
    d_v: int = 32
    heads: int = 1
    n_classes: int = 3
    bev_kernel: Tuple[int, int] = (4, 4)
    rv_kernel: Tuple[int, int] = (4, 4)
    mode: str = "conv"
    decouple: bool = True

    def __post_init__(self):
        self.bev_kernel = tuple(self.bev_kernel)
        self.rv_kernel = tuple(self.rv_kernel)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("channels", "d_f", "d_q", "d_v", "heads", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_v != self.d_f:
            raise ValueError("d_v must equal d_f: fused features are added onto the neck output")


@dataclass
class ModelOutput:
    cls_logits: Tensor  # N_bev x K
    reg: Tensor  # N_bev x 4
    bundle: AttentionBundle
    fused_sem: ViewMap
    fused_geo: ViewMap


def _conv(rng, c_out, c_in):
    w = rng.normal(0.0, math.sqrt(2.0 / (9 * c_in)), (c_out, c_in, 3, 3))
    return Affine(Tensor(w, requires_grad=True), Tensor(np.zeros(c_out), requires_grad=True))


def _point(rng, c_out, c_in):
    w = rng.normal(0.0, math.sqrt(1.0 / c_in), (c_out, c_in))
    return Affine(Tensor(w, requires_grad=True), Tensor(np.zeros(c_out), requires_grad=True))


@dataclass
class Neck:
    """3x3 conv -> per-channel spatial normalization -> ReLU."""

    conv: Affine
    gamma: Tensor
    beta: Tensor

    def parameters(self):
        return self.conv.parameters() + [self.gamma, self.beta]

    @classmethod
    def init(cls, rng, c_out, c_in) -> "Neck":
        return cls(_conv(rng, c_out, c_in), Tensor(np.ones(c_out), requires_grad=True),
                   Tensor(np.zeros(c_out), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return relu(instance_norm(conv2d(x, self.conv.weight, self.conv.bias), self.gamma, self.beta))


@dataclass
class VistaNet:
    config: ModelConfig
    voxel: VoxelConfig
    encoder: EncoderWeights
    neck_bev: Neck
    neck_rv: Neck
    vista: VistaWeights
    head_cls: Affine
    head_reg: Affine

    @classmethod
    def init(cls, config: ModelConfig, voxel: VoxelConfig, seed: int = 0) -> "VistaNet":
        rng = np.random.default_rng(seed)
        c_bev, _, _ = view_shape(voxel.grid_shape, config.channels, BEV)
        c_rv, _, _ = view_shape(voxel.grid_shape, config.channels, RV)
        return cls(
            config,
            voxel,
            EncoderWeights.init(rng, config.channels),
            Neck.init(rng, config.d_f, c_bev),
            Neck.init(rng, config.d_f, c_rv),
            VistaWeights.init(rng, config.d_f, config.d_q, config.d_v),
            _point(rng, config.n_classes, config.d_v),
            _point(rng, N_REG, config.d_v),
        )

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        out = [(f"encoder.{i}", p) for i, p in enumerate(self.encoder.parameters())]
        for name in ("neck_bev", "neck_rv", "head_cls", "head_reg"):
            out += [(f"{name}.{i}", p) for i, p in enumerate(getattr(self, name).parameters())]
        out += [(f"vista.{n}", p) for n, p in self.vista.named_parameters()]
        return out

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for n, p in params.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{n}: shape {arr.shape} != expected {p.shape}")
            p.data = arr.copy()

    # ------------------------------------------------------------------

    def views(self, grid: VoxelGrid) -> Tuple[ViewMap, ViewMap]:
        """Encode, collapse and run the per-view necks."""
        f3d = encode_features(grid, self.encoder)
        bev, rv = collapse(f3d, BEV), collapse(f3d, RV)
        bev_f = self.neck_bev(bev.features)
        rv_f = self.neck_rv(rv.features)
        return (
            ViewMap(BEV, bev_f, bev.folded_axis, (self.config.d_f, 1)),
            ViewMap(RV, rv_f, rv.folded_axis, (self.config.d_f, 1)),
        )

    def forward(self, grid: VoxelGrid, force_uniform: bool = False) -> ModelOutput:
        cfg = self.config
        bev, rv = self.views(grid)
        fused_sem, fused_geo, bundle = vista_forward(
            bev, rv, self.vista, cfg.mode, cfg.decouple, cfg.bev_kernel, cfg.rv_kernel, cfg.heads, force_uniform
        )
        cls_logits = transpose(self._head(fused_sem, self.head_cls))
        reg = transpose(self._head(fused_geo, self.head_reg))
        return ModelOutput(cls_logits, reg, bundle, fused_sem, fused_geo)

    @staticmethod
    def _head(v: ViewMap, head: Affine) -> Tensor:
        c, s1, s2 = v.features.shape
        return conv1d_pointwise(reshape(v.features, (c, s1 * s2)), head.weight, head.bias)

    # ------------------------------------------------------------------

    def query_centers(self) -> PillarCenters:
        """Metric centers of the pooled BEV cells (rows of the attention matrix)."""
        v = self.voxel
        nx, ny, _ = v.grid_shape
        return PillarCenters(
            cell_centers(v.x_range, v.y_range, v.resolution[0], v.resolution[1], (nx, ny), self.config.bev_kernel)
        )

    def source_cells(self) -> np.ndarray:
        """(x_lo, x_hi, z_lo, z_hi) of each pooled RV cell (columns of the attention matrix)."""
        v = self.voxel
        nx, _, nz = v.grid_shape
        kx, kz = self.config.rv_kernel
        xb = cell_bounds(v.x_range[0], v.resolution[0], nx, kx)
        zb = cell_bounds(v.z_range[0], v.resolution[2], nz, kz)
        return np.array([[*x, *z] for x in xb for z in zb])


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
