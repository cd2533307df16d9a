"""Per-stage latency measurements."""

from __future__ import annotations

import time
from typing import Callable, List, NamedTuple

import numpy as np

from .harness.scenes import generate_scene
from .harness.training import TrainConfig, scene_loss
from .model import ModelConfig, VistaNet
from .projection import BEV, RV, collapse, pool_for_attention
from .vista import branch, cross_attention, ffn, project_qkv
from .voxelizer import VoxelConfig, encode_features, voxelize

BENCH_FIELDS = ("stage", "n", "m", "repeats", "median_ms")


class BenchRow(NamedTuple):
    stage: str
    n: int
    m: int
    repeats: int
    median_ms: float


def _median_ms(fn: Callable[[], object], repeats: int) -> float:
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return float(np.median(samples) * 1e3)


def _attention_stage(net: VistaNet, bev, rv, bev_kernel, rv_kernel):
    """Branch projections, attention and FFN on already pooled Q/K/V; every part is linear in n."""
    mode = "linear" if net.config.mode == "linear" else "conv"
    qp, kp, vp = project_qkv(pool_for_attention(bev, bev_kernel), pool_for_attention(rv, rv_kernel), net.vista, mode)

    def run():
        for name in ("sem", "geo"):
            qi, ki = branch(qp, kp, net.vista, name)
            _, f = cross_attention(qi, ki, vp, net.config.heads)
            ffn(f, net.vista, name)

    return run, qp.shape[0], kp.shape[0]


def benchmark(
    voxel: VoxelConfig, model: ModelConfig, repeats: int = 5, seed: int = 0, scaling_kernels=((4, 4), (2, 2), (1, 1))
) -> List[BenchRow]:
    """Median latency of each pipeline stage on one generated scene.

    The ``attention`` rows repeat the attention stage for several BEV pooling
    kernels at a fixed RV kernel, so ``m`` stays put while ``n`` grows.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    net = VistaNet.init(model, voxel, seed)
    scene = generate_scene(seed, 3, voxel)
    grid = voxelize(scene.cloud, voxel)
    f3d = encode_features(grid, net.encoder)
    bev, rv = net.views(grid)
    out = net.forward(grid)
    n, m = out.bundle.A_sem.shape
    tc = TrainConfig(mode=model.mode, decouple=model.decouple)

    def backward():
        net.zero_grad()
        scene_loss(net, scene, tc)[0].backward()

    rows = [
        BenchRow("voxelize", n, m, repeats, _median_ms(lambda: voxelize(scene.cloud, voxel), repeats)),
        BenchRow("encode", n, m, repeats, _median_ms(lambda: encode_features(grid, net.encoder), repeats)),
        BenchRow("neck", n, m, repeats, _median_ms(
            lambda: (net.neck_bev(collapse(f3d, BEV).features), net.neck_rv(collapse(f3d, RV).features)), repeats)),
        BenchRow("forward", n, m, repeats, _median_ms(lambda: net.forward(grid), repeats)),
        BenchRow("forward_backward", n, m, repeats, _median_ms(backward, repeats)),
    ]
    for kernel in scaling_kernels:
        run, n_k, m_k = _attention_stage(net, bev, rv, tuple(kernel), model.rv_kernel)
        rows.append(BenchRow("attention", n_k, m_k, repeats, _median_ms(run, repeats)))
    return rows
