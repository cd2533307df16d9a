"""Cross-view attention fusion: BEV cells query RV cells.

Queries, keys and values come from 3x3 convolutions over the pooled view
maps. Queries and keys are then re-projected per branch (semantic for
classification, geometric for regression); values are shared.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional, Tuple

import numpy as np

from .ndcore import (
    DimensionError,
    Tensor,
    add,
    col_mean_broadcast,
    concat,
    conv1d_pointwise,
    conv2d,
    layer_norm,
    matmul,
    permute,
    relu,
    reshape,
    scale,
    softmax_rows,
    take,
    transpose,
)
from .projection import BEV, ViewMap, pool_for_attention, scatter_back

MODES = ("conv", "linear", "gap")
BRANCHES = ("sem", "geo")


@dataclass
class Affine:
    """Weight/bias pair for a convolution or pointwise projection."""

    weight: Tensor
    bias: Tensor

    def parameters(self):
        return [self.weight, self.bias]


@dataclass
class FFNWeights:
    expand: Affine  # 4*d_v x d_v
    contract: Affine  # d_v x 4*d_v
    gamma: Tensor
    beta: Tensor

    def parameters(self):
        return self.expand.parameters() + self.contract.parameters() + [self.gamma, self.beta]


@dataclass
class VistaWeights:
    conv_q: Affine
    conv_k: Affine
    conv_v: Affine
    branch_q_sem: Affine
    branch_q_geo: Affine
    branch_k_sem: Affine
    branch_k_geo: Affine
    ffn_sem: FFNWeights
    ffn_geo: FFNWeights

    @property
    def d_f(self) -> int:
        return self.conv_q.weight.shape[1]

    @property
    def d_q(self) -> int:
        return self.conv_q.weight.shape[0]

    @property
    def d_v(self) -> int:
        return self.conv_v.weight.shape[0]

    def named_parameters(self):
        for f in fields(self):
            group = getattr(self, f.name)
            for i, p in enumerate(group.parameters()):
                yield f"{f.name}.{i}", p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    @classmethod
    def init(cls, rng: np.random.Generator, d_f: int, d_q: int = 32, d_v: int = 32) -> "VistaWeights":
        def conv(c_out, c_in):
            w = rng.normal(0.0, math.sqrt(2.0 / (9 * c_in)), (c_out, c_in, 3, 3))
            return Affine(Tensor(w, requires_grad=True), Tensor(np.zeros(c_out), requires_grad=True))

        def point(c_out, c_in, std):
            w = rng.normal(0.0, std, (c_out, c_in))
            return Affine(Tensor(w, requires_grad=True), Tensor(np.zeros(c_out), requires_grad=True))

        def ffn():
            return FFNWeights(
                point(4 * d_v, d_v, math.sqrt(2.0 / d_v)),
                point(d_v, 4 * d_v, math.sqrt(1.0 / (4 * d_v))),
                Tensor(np.ones(d_v), requires_grad=True),
                Tensor(np.zeros(d_v), requires_grad=True),
            )

        std = math.sqrt(1.0 / d_q)
        return cls(
            conv(d_q, d_f),
            conv(d_q, d_f),
            conv(d_v, d_f),
            point(d_q, d_q, std),
            point(d_q, d_q, std),
            point(d_q, d_q, std),
            point(d_q, d_q, std),
            ffn(),
            ffn(),
        )


@dataclass
class AttentionBundle:
    A_sem: Tensor  # n x m
    A_geo: Tensor
    F_sem: Tensor  # n x d_v, attention output before the FFN
    F_geo: Tensor
    query_shape: Tuple[int, int] = (0, 0)
    source_shape: Tuple[int, int] = (0, 0)


def _project_map(v: ViewMap, conv: Affine, mode: str) -> Tensor:
    c, s1, s2 = v.features.shape
    if c != conv.weight.shape[1]:
        raise DimensionError(f"{v.view} map has {c} channels, projection expects {conv.weight.shape[1]}")
    if mode == "conv":
        out = conv2d(v.features, conv.weight, conv.bias)
        return permute(reshape(out, (out.shape[0], s1 * s2)), (1, 0))
    # per-cell linear map: the centre tap of the same kernel, no spatial context
    centre = take(conv.weight, (slice(None), slice(None), 1, 1))
    out = conv1d_pointwise(reshape(v.features, (c, s1 * s2)), centre, conv.bias)
    return transpose(out)


def project_qkv(bev: ViewMap, rv: ViewMap, w: VistaWeights, mode: str = "conv"):
    """Return Q (n x d_q) from the BEV map and K (m x d_q), V (m x d_v) from the RV map."""
    if mode not in ("conv", "linear"):
        raise ValueError(f"project_qkv mode must be 'conv' or 'linear', got {mode!r}")
    q = _project_map(bev, w.conv_q, mode)
    k = _project_map(rv, w.conv_k, mode)
    v = _project_map(rv, w.conv_v, mode)
    return q, k, v


def branch(q: Tensor, k: Tensor, w: VistaWeights, name: str) -> Tuple[Tensor, Tensor]:
    if name not in BRANCHES:
        raise ValueError(f"unknown branch {name!r}")
    wq = getattr(w, f"branch_q_{name}")
    wk = getattr(w, f"branch_k_{name}")
    qi = transpose(conv1d_pointwise(transpose(q), wq.weight, wq.bias))
    ki = transpose(conv1d_pointwise(transpose(k), wk.weight, wk.bias))
    return qi, ki


def _uniform(n: int, m: int) -> Tensor:
    return Tensor(np.full((n, m), 1.0 / m))


def cross_attention(qi: Tensor, ki: Tensor, v: Tensor, heads: int = 1, force_uniform: bool = False):
    """Scaled dot-product attention; returns (A, F) with F = A V.

    With several heads the feature axis is split evenly and the reported
    attention matrix is the head average.
    """
    if qi.shape[1] != ki.shape[1]:
        raise DimensionError(f"query width {qi.shape[1]} != key width {ki.shape[1]}")
    if v.shape[0] != ki.shape[0]:
        raise DimensionError("keys and values must have the same number of rows")
    n, d_q = qi.shape
    m = ki.shape[0]
    if force_uniform:
        a = _uniform(n, m)
        return a, matmul(a, v)
    if heads == 1:
        a = softmax_rows(scale(matmul(qi, transpose(ki)), 1.0 / math.sqrt(d_q)))
        return a, matmul(a, v)
    if d_q % heads or v.shape[1] % heads:
        raise DimensionError(f"{heads} heads do not divide d_q={d_q} / d_v={v.shape[1]}")
    dh, dvh = d_q // heads, v.shape[1] // heads
    maps, outs = [], []
    for h in range(heads):
        qh = take(qi, (slice(None), slice(h * dh, (h + 1) * dh)))
        kh = take(ki, (slice(None), slice(h * dh, (h + 1) * dh)))
        vh = take(v, (slice(None), slice(h * dvh, (h + 1) * dvh)))
        ah = softmax_rows(scale(matmul(qh, transpose(kh)), 1.0 / math.sqrt(dh)))
        maps.append(ah)
        outs.append(matmul(ah, vh))
    a = maps[0]
    for extra in maps[1:]:
        a = add(a, extra)
    return scale(a, 1.0 / heads), concat(outs, axis=1)


def ffn(f: Tensor, w: VistaWeights, name: str) -> Tensor:
    """LayerNorm(F + W2 relu(W1 F)), evaluated per query cell."""
    p: FFNWeights = getattr(w, f"ffn_{name}")
    ft = transpose(f)
    hidden = relu(conv1d_pointwise(ft, p.expand.weight, p.expand.bias))
    out = conv1d_pointwise(hidden, p.contract.weight, p.contract.bias)
    return layer_norm(add(f, transpose(out)), p.gamma, p.beta)


def _to_map(seq: Tensor, like: ViewMap) -> ViewMap:
    s1, s2 = like.spatial
    feats = reshape(transpose(seq), (seq.shape[1], s1, s2))
    return ViewMap(BEV, feats, like.folded_axis, (seq.shape[1], 1), like.kernel)


def vista_forward(
    bev: ViewMap,
    rv: ViewMap,
    w: VistaWeights,
    mode: str = "conv",
    decouple: bool = True,
    bev_kernel: Tuple[int, int] = (4, 4),
    rv_kernel: Tuple[int, int] = (4, 1),
    heads: int = 1,
    force_uniform: bool = False,
):
    """Fuse full-resolution BEV and RV maps.

    Returns ``(fused_sem, fused_geo, bundle)``; the fused maps are the BEV
    map plus the broadcast FFN outputs of each branch.
    """
    if mode not in MODES:
        raise ValueError(f"unknown fusion mode {mode!r}; expected one of {MODES}")
    bev_p = pool_for_attention(bev, bev_kernel)
    rv_p = pool_for_attention(rv, rv_kernel)
    n = bev_p.spatial[0] * bev_p.spatial[1]
    m = rv_p.spatial[0] * rv_p.spatial[1]

    if mode == "gap":
        v = _project_map(rv_p, w.conv_v, "conv")
        a = _uniform(n, m)
        f = col_mean_broadcast(v, n)
        a_sem = a_geo = a
        f_sem = f_geo = f
        out_sem, out_geo = ffn(f, w, "sem"), ffn(f, w, "geo")
    else:
        q, k, v = project_qkv(bev_p, rv_p, w, mode)
        qs, ks = branch(q, k, w, "sem")
        a_sem, f_sem = cross_attention(qs, ks, v, heads, force_uniform)
        if decouple:
            qg, kg = branch(q, k, w, "geo")
            a_geo, f_geo = cross_attention(qg, kg, v, heads, force_uniform)
            out_sem, out_geo = ffn(f_sem, w, "sem"), ffn(f_geo, w, "geo")
        else:
            a_geo, f_geo = a_sem, f_sem
            out_sem = out_geo = ffn(f_sem, w, "sem")

    fused_sem = scatter_back(_to_map(out_sem, bev_p), bev)
    fused_geo = fused_sem if out_geo is out_sem else scatter_back(_to_map(out_geo, bev_p), bev)
    bundle = AttentionBundle(a_sem, a_geo, f_sem, f_geo, bev_p.spatial, rv_p.spatial)
    return fused_sem, fused_geo, bundle
