"""Finite-difference checks over every differentiable operator and the full network."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import ndcore as nd
from .losses import BoxFootprint, focal_loss, l1_loss, variance_loss
from .model import ModelConfig, VistaNet
from .ndcore import GradCheckReport, Tensor, grad_check
from .projection import BEV, RV, ViewMap, collapse
from .vista import VistaWeights, cross_attention, ffn, project_qkv, vista_forward
from .voxelizer import EncoderWeights, PointCloud, VoxelConfig, desk_config, encode_features, voxelize

OP_TOLERANCE = 1e-5
NETWORK_TOLERANCE = 1e-4


@dataclass
class GradCase:
    name: str
    f: Callable[[Tensor], Tensor]
    x: Tensor
    indices: Optional[Sequence[int]] = None
    tolerance: float = OP_TOLERANCE


@dataclass
class GradResult:
    name: str
    report: GradCheckReport
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.report.max_rel_error < self.tolerance


def _param(rng, *shape, lo=None):
    data = rng.normal(size=shape)
    if lo is not None:
        # keep entries away from ReLU / |.| kinks
        data = np.sign(data) * (lo + np.abs(data))
    return Tensor(data, requires_grad=True)


def _readout(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    weights = Tensor(rng.normal(size=out.shape))
    return lambda t: nd.sum_all(nd.mul(t, weights))


def _projected(op: Callable[[Tensor], Tensor], x: Tensor, rng) -> Callable[[Tensor], Tensor]:
    read = _readout(op(x), rng)
    return lambda t: read(op(t))


def op_cases(seed: int = 0) -> List[GradCase]:
    rng = np.random.default_rng(seed)
    cases: List[GradCase] = []

    def add_case(name, op, x):
        cases.append(GradCase(name, _projected(op, x, rng), x))

    other = Tensor(rng.normal(size=(3, 4)))
    add_case("add", lambda t: nd.add(t, other), _param(rng, 3, 4))
    add_case("mul", lambda t: nd.mul(t, other), _param(rng, 3, 4))
    add_case("scale", lambda t: nd.scale(t, -2.5), _param(rng, 3, 4))
    cases.append(GradCase("sum_all", nd.sum_all, _param(rng, 3, 4)))
    add_case("relu", nd.relu, _param(rng, 3, 4, lo=0.1))
    add_case("reshape", lambda t: nd.reshape(t, (4, 3)), _param(rng, 3, 4))
    add_case("transpose", nd.transpose, _param(rng, 3, 4))
    add_case("permute", lambda t: nd.permute(t, (2, 0, 1)), _param(rng, 2, 3, 4))
    add_case("take", lambda t: nd.take(t, (slice(1, 3), slice(None, None, 2))), _param(rng, 3, 4))
    tail = Tensor(rng.normal(size=(3, 2)))
    add_case("concat", lambda t: nd.concat([t, tail], axis=1), _param(rng, 3, 4))
    add_case("fold_axis_into_channels", lambda t: nd.fold_axis_into_channels(t, 2), _param(rng, 2, 3, 4, 2))

    b = Tensor(rng.normal(size=(4, 2)))
    add_case("matmul[a]", lambda t: nd.matmul(t, b), _param(rng, 3, 4))
    a = Tensor(rng.normal(size=(3, 4)))
    add_case("matmul[b]", lambda t: nd.matmul(a, t), _param(rng, 4, 2))
    add_case("softmax_rows", nd.softmax_rows, _param(rng, 2, 3))
    add_case("col_mean_broadcast", lambda t: nd.col_mean_broadcast(t, 5), _param(rng, 4, 3))

    x = _param(rng, 2, 5, 4)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    bias = Tensor(rng.normal(size=3))
    add_case("conv2d[x]", lambda t: nd.conv2d(t, w, bias), x)
    add_case("conv2d[w]", lambda t: nd.conv2d(x, t, bias), _param(rng, 3, 2, 3, 3))
    add_case("conv2d[b]", lambda t: nd.conv2d(x, w, t), _param(rng, 3))

    xs = Tensor(rng.normal(size=(3, 5)))
    ws = Tensor(rng.normal(size=(2, 3)))
    bs = Tensor(rng.normal(size=2))
    add_case("conv1d_pointwise[x]", lambda t: nd.conv1d_pointwise(t, ws, bs), _param(rng, 3, 5))
    add_case("conv1d_pointwise[w]", lambda t: nd.conv1d_pointwise(xs, t, bs), _param(rng, 2, 3))
    add_case("conv1d_pointwise[b]", lambda t: nd.conv1d_pointwise(xs, ws, t), _param(rng, 2))

    add_case("avg_pool2d", lambda t: nd.avg_pool2d(t, 2, 3), _param(rng, 2, 5, 7))
    add_case("unpool_broadcast", lambda t: nd.unpool_broadcast(t, 2, 3, 5, 7), _param(rng, 2, 3, 3))

    xl = Tensor(rng.normal(size=(4, 6)))
    gl = Tensor(rng.normal(size=6))
    bl = Tensor(rng.normal(size=6))
    add_case("layer_norm[x]", lambda t: nd.layer_norm(t, gl, bl), _param(rng, 4, 6))
    add_case("layer_norm[gamma]", lambda t: nd.layer_norm(xl, t, bl), _param(rng, 6))
    add_case("layer_norm[beta]", lambda t: nd.layer_norm(xl, gl, t), _param(rng, 6))
    gi = Tensor(rng.normal(size=3))
    bi = Tensor(rng.normal(size=3))
    add_case("instance_norm[x]", lambda t: nd.instance_norm(t, gi, bi), _param(rng, 3, 4, 5))

    # losses
    boxes = [BoxFootprint(2.0, 2.0, 0.0, 0.0), BoxFootprint(1.0, 3.0, 1.0, 0.5)]
    centers = np.array([[0.5, 0.5], [1.5, 0.5], [-0.5, -0.5], [3.0, 3.0]])
    cases.append(
        GradCase("variance_loss", lambda t: variance_loss(nd.softmax_rows(t), boxes, centers), _param(rng, 4, 6))
    )
    cases.append(GradCase("variance_loss[A]", lambda t: variance_loss(t, boxes, centers), _param(rng, 4, 6)))
    targets = np.array([0, -1, 2, -1, 1])
    cases.append(GradCase("focal_loss", lambda t: focal_loss(t, targets), _param(rng, 5, 3)))
    reg_target = rng.normal(size=(5, 4))
    mask = np.array([True, False, True, True, False])
    cases.append(
        GradCase("l1_loss", lambda t: l1_loss(t, reg_target, mask), Tensor(reg_target + rng.choice([-1, 1], (5, 4)) * rng.uniform(0.1, 1, (5, 4)), requires_grad=True))
    )
    return cases


def module_cases(seed: int = 0) -> List[GradCase]:
    """Encoder, convolutional projections and FFN on small inputs."""
    rng = np.random.default_rng(seed + 1)
    cases: List[GradCase] = []

    cfg = VoxelConfig((0.0, 1.0), (0.0, 1.0), (0.0, 1.0), (0.25, 0.25, 0.5))
    pts = np.c_[rng.uniform(0, 1, (12, 3)), rng.uniform(0, 1, 12)]
    grid = voxelize(PointCloud(pts), cfg)
    enc = EncoderWeights.init(rng, 4)
    enc.b1.data[:] = rng.uniform(0.05, 0.2, 4)
    enc.b2.data[:] = rng.uniform(0.05, 0.2, 4)

    def encode_with(t):
        return nd.sum_all(encode_features(grid, EncoderWeights(t, enc.b1, enc.w2, enc.b2)))

    cases.append(GradCase("encode_features[w1]", encode_with, enc.w1))

    w = VistaWeights.init(rng, d_f=3, d_q=4, d_v=3)
    bev = ViewMap(BEV, Tensor(rng.normal(size=(3, 4, 4))), 3, (3, 1))
    rv = ViewMap(RV, Tensor(rng.normal(size=(3, 4, 2))), 2, (3, 1))

    def qsum(_t):
        q, _, _ = project_qkv(bev, rv, w, "conv")
        return nd.sum_all(nd.mul(q, q))

    cases.append(GradCase("project_qkv[conv_q]", qsum, w.conv_q.weight))

    qi, ki = _param(rng, 6, 4), Tensor(rng.normal(size=(3, 4)))
    v = Tensor(rng.normal(size=(3, 4)))
    for heads in (1, 2):
        for out, label in ((0, "A"), (1, "F")):
            op = lambda t, h=heads, o=out: cross_attention(t, ki, v, h)[o]
            cases.append(GradCase(f"cross_attention[{label}, heads={heads}]", _projected(op, qi, rng), qi))

    f_in = _param(rng, 5, 3)
    cases.append(GradCase("ffn[F]", _projected(lambda t: ffn(t, w, "sem"), f_in, rng), f_in))

    bev_x = Tensor(rng.normal(size=(3, 4, 4)), requires_grad=True)
    r_sem, r_geo = Tensor(rng.normal(size=(3, 4, 4))), Tensor(rng.normal(size=(3, 4, 4)))
    for mode in ("conv", "linear", "gap"):
        def fused(t, mode=mode):
            fs, fg, _ = vista_forward(ViewMap(BEV, t, 3, (3, 1)), rv, w, mode, True, (2, 2), (2, 1))
            return nd.add(nd.sum_all(nd.mul(fs.features, r_sem)), nd.sum_all(nd.mul(fg.features, r_geo)))
        cases.append(GradCase(f"vista_forward[{mode}]", fused, bev_x))
    return cases


def _perturbed_model(cfg: ModelConfig, voxel: VoxelConfig, seed: int) -> VistaNet:
    net = VistaNet.init(cfg, voxel, seed)
    rng = np.random.default_rng(seed + 7)
    for name, p in net.named_parameters():
        if p.data.ndim == 1 and not np.any(p.data):
            p.data = rng.uniform(0.02, 0.1, p.shape)
    return net


def _clear_hinges(net: VistaNet, grid, margin: float = 0.05) -> None:
    """Shift encoder and neck biases so no wide ReLU input sits within ``margin`` of its hinge.

    These layers apply each weight to thousands of cells, so at zero margin a
    finite-difference stencil of width 1e-5 almost surely straddles a hinge.
    """
    enc = net.encoder
    occupied = grid.count.data.reshape(-1) > 0
    x = grid.mean_feature.data.reshape(4, -1)[:, occupied]
    pre1 = enc.w1.data @ x
    enc.b1.data = np.maximum(enc.b1.data, margin - pre1.min(axis=1))
    h1 = enc.w1.data @ x + enc.b1.data[:, None]
    pre2 = enc.w2.data @ h1
    enc.b2.data = np.maximum(enc.b2.data, margin - pre2.min(axis=1))

    f3d = encode_features(grid, enc)
    for neck, view in ((net.neck_bev, BEV), (net.neck_rv, RV)):
        y = nd.conv2d(collapse(f3d, view).features, neck.conv.weight, neck.conv.bias)
        normed = nd.instance_norm(y, neck.gamma, Tensor(np.zeros(neck.beta.shape))).data
        neck.beta.data = np.maximum(neck.beta.data, margin - normed.min(axis=(1, 2)))


def network_cases(
    seed: int = 0,
    voxel: Optional[VoxelConfig] = None,
    config: Optional[ModelConfig] = None,
    samples_per_tensor: int = 3,
) -> List[GradCase]:
    """End-to-end readouts through the whole network on a generated scene.

    Each listed parameter tensor is checked at a few seeded random positions.
    """
    from .harness.scenes import SceneSample, generate_scene
    from .harness.training import TrainConfig, scene_loss

    voxel = voxel or desk_config()
    config = config or ModelConfig()
    net = _perturbed_model(config, voxel, seed)
    scene = generate_scene(seed + 11, 3, voxel)
    # a sparse scatter through the whole volume keeps every folded channel
    # non-constant; otherwise some weights have a structurally zero gradient
    srng = np.random.default_rng(seed + 13)
    fill = np.c_[srng.uniform(voxel.mins, voxel.maxs, (256, 3)), srng.uniform(0, 1, 256)]
    scene = SceneSample(PointCloud(np.vstack([scene.cloud.points, fill])), scene.boxes, scene.seed)
    grid = voxelize(scene.cloud, voxel)
    _clear_hinges(net, grid)
    rng = np.random.default_rng(seed + 3)
    probe = net.forward(grid)
    r_sem = Tensor(rng.normal(size=probe.fused_sem.features.shape) / probe.fused_sem.features.size ** 0.5)
    r_a = Tensor(rng.normal(size=probe.bundle.A_sem.shape))
    tc = TrainConfig()

    def readout(_t):
        out = net.forward(grid)
        return nd.add(nd.sum_all(nd.mul(out.fused_sem.features, r_sem)), nd.sum_all(nd.mul(out.bundle.A_geo, r_a)))

    def loss(_t):
        return scene_loss(net, scene, tc)[0]

    params = dict(net.named_parameters())
    names = [
        "encoder.0",
        "encoder.2",
        "neck_bev.0",
        "neck_rv.0",
        "vista.conv_q.0",
        "vista.conv_k.0",
        "vista.conv_v.0",
        "vista.branch_q_sem.0",
        "vista.branch_k_geo.0",
        "vista.ffn_sem.0",
        "head_cls.0",
        "head_reg.0",
    ]
    cases = []
    for n in names:
        p = params[n]
        idx = rng.choice(p.size, size=min(samples_per_tensor, p.size), replace=False)
        if not n.startswith("head"):
            cases.append(GradCase(f"network readout[{n}]", readout, p, idx, NETWORK_TOLERANCE))
        cases.append(GradCase(f"network loss[{n}]", loss, p, idx, NETWORK_TOLERANCE))
    return cases


def run_suite(cases: Sequence[GradCase], eps: float = 1e-5, strict: bool = True) -> List[GradResult]:
    return [GradResult(c.name, grad_check(c.f, c.x, eps, c.indices, strict=strict), c.tolerance) for c in cases]


def default_suite(seed: int = 0, include_network: bool = True, **network_kw) -> List[GradCase]:
    cases = op_cases(seed) + module_cases(seed)
    if include_network:
        cases += network_cases(seed, **network_kw)
    return cases
