"""Dense float64 tensors with a single-use reverse-mode tape.

Only the operators the fusion pipeline needs are provided. Every operator
records a closure that maps the output gradient to per-input gradients;
``Tensor.backward`` walks the tape in reverse topological order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "ContractError",
    "GradCheckReport",
    "add",
    "mul",
    "scale",
    "sum_all",
    "relu",
    "reshape",
    "transpose",
    "permute",
    "take",
    "concat",
    "fold_axis_into_channels",
    "matmul",
    "softmax_rows",
    "conv2d",
    "conv1d_pointwise",
    "avg_pool2d",
    "unpool_broadcast",
    "layer_norm",
    "instance_norm",
    "col_mean_broadcast",
    "grad_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible with the operator."""


class ContractError(ValueError):
    """A caller violated an operator precondition."""


class Tensor:
    """N-dimensional float64 array with optional gradient tracking.

    Tensors built from external data are checked for finiteness. Results of
    operators skip that check; the training loop detects divergence itself.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(s < 1 for s in arr.shape):
            raise DimensionError(f"extents must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._consumed = False

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        if any(p._consumed for p in parents):
            raise RuntimeError("operand belongs to a consumed tape; re-run the forward pass")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out._consumed = False
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._result(self.data, (), None)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate gradients into every leaf reachable from this tensor.

        The tape is released afterwards; a second call on the same graph
        raises ``RuntimeError``.
        """
        if self._consumed:
            raise RuntimeError("tape already consumed; re-run the forward pass")
        if grad is None:
            if self.size != 1:
                raise ContractError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise DimensionError(f"gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topological(self)
        pending = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._consumed = True


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and structural
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor._result(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(src),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {a.data.ndim}")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return Tensor._result(out, (a,), lambda g: (g.transpose(inverse),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError("transpose expects a matrix")
    return permute(a, (1, 0))


def take(a: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing with a scatter backward."""
    out = np.array(a.data[index], dtype=np.float64)
    if out.ndim == 0 or any(s < 1 for s in out.shape):
        raise DimensionError("take must select a non-empty sub-array")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return Tensor._result(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor._result(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def fold_axis_into_channels(x: Tensor, axis: int) -> Tensor:
    """Fold spatial ``axis`` (1..3) of a C x A x B x D volume into channels.

    Channels come out as ``c * extent + k``, i.e. (C, folded extent) layout;
    the two remaining spatial axes keep their relative order.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"expected a rank-4 volume, got rank {x.data.ndim}")
    if axis not in (1, 2, 3):
        raise DimensionError("can only fold a spatial axis (1, 2 or 3)")
    rest = [ax for ax in (1, 2, 3) if ax != axis]
    moved = permute(x, (0, axis, *rest))
    c, k, s1, s2 = moved.shape
    return reshape(moved, (c * k, s1, s2))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects matrices")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner extents {a.shape[1]} and {b.shape[0]} differ")
    ad, bd = a.data, b.data
    return Tensor._result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError("softmax_rows expects a matrix")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return Tensor._result(p, (x,), backward)


def col_mean_broadcast(v: Tensor, n: int) -> Tensor:
    """n x d matrix whose every row is the column mean of ``v`` (m x d)."""
    if v.data.ndim != 2:
        raise DimensionError("col_mean_broadcast expects a matrix")
    m = v.shape[0]
    mean = v.data.mean(axis=0, keepdims=True)
    out = np.repeat(mean, n, axis=0)
    return Tensor._result(out, (v,), lambda g: (np.repeat(g.sum(axis=0, keepdims=True) / m, m, axis=0),))


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 cross-correlation with zero padding 1 (same-size output).

    Evaluated as nine shifted matrix products, one per kernel tap.
    """
    if x.data.ndim != 3 or w.data.ndim != 4 or b.data.ndim != 1:
        raise DimensionError("conv2d expects x: C_in x H x W, w: C_out x C_in x 3 x 3, b: C_out")
    c_out, c_in, kh, kw = w.shape
    if (kh, kw) != (3, 3):
        raise DimensionError(f"conv2d kernel must be 3x3, got {kh}x{kw}")
    if x.shape[0] != c_in:
        raise DimensionError(f"conv2d: input has {x.shape[0]} channels, kernel expects {c_in}")
    if b.shape[0] != c_out:
        raise DimensionError(f"conv2d: bias has {b.shape[0]} entries, expected {c_out}")
    _, h, wd = x.shape
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    # per-tap kernels made contiguous so every product goes through BLAS
    wt = np.ascontiguousarray(w.data.transpose(2, 3, 0, 1))
    out = np.empty((c_out, h * wd))
    out[:] = b.data[:, None]
    taps = []
    for di in range(3):
        for dj in range(3):
            patch = np.ascontiguousarray(xp[:, di:di + h, dj:dj + wd]).reshape(c_in, h * wd)
            taps.append(patch)
            out += wt[di, dj] @ patch

    def backward(g):
        g2 = np.ascontiguousarray(g).reshape(c_out, h * wd)
        gw = np.empty((3, 3, c_out, c_in)) if w.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for t, (di, dj) in enumerate((i, j) for i in range(3) for j in range(3)):
            if gw is not None:
                gw[di, dj] = g2 @ taps[t].T
            if gxp is not None:
                gxp[:, di:di + h, dj:dj + wd] += (wt[di, dj].T @ g2).reshape(c_in, h, wd)
        gx = gxp[:, 1:-1, 1:-1] if gxp is not None else None
        gw = gw.transpose(2, 3, 0, 1).copy() if gw is not None else None
        return gx, gw, g2.sum(axis=1)

    return Tensor._result(out.reshape(c_out, h, wd), (x, w, b), backward)


def conv1d_pointwise(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Kernel-size-1 convolution over a C_in x L sequence."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise DimensionError("conv1d_pointwise expects x: C_in x L, w: C_out x C_in, b: C_out")
    if w.shape[1] != x.shape[0]:
        raise DimensionError(f"conv1d_pointwise: input has {x.shape[0]} channels, weight expects {w.shape[1]}")
    if b.shape[0] != w.shape[0]:
        raise DimensionError("conv1d_pointwise: bias length differs from output channels")
    xd, wd = x.data, w.data
    out = wd @ xd + b.data[:, None]
    return Tensor._result(out, (x, w, b), lambda g: (wd.T @ g, g @ xd.T, g.sum(axis=1)))


def _window_counts(n: int, k: int) -> np.ndarray:
    starts = np.arange(0, n, k)
    return np.minimum(starts + k, n) - starts


def _window_sum(a: np.ndarray, kh: int, kw: int) -> np.ndarray:
    c, h, w = a.shape
    oh, ow = -(-h // kh), -(-w // kw)
    padded = np.zeros((c, oh * kh, ow * kw))
    padded[:, :h, :w] = a
    return padded.reshape(c, oh, kh, ow, kw).sum(axis=(2, 4))


def _broadcast_windows(a: np.ndarray, kh: int, kw: int, h: int, w: int) -> np.ndarray:
    return np.repeat(np.repeat(a, kh, axis=1), kw, axis=2)[:, :h, :w]


def avg_pool2d(x: Tensor, kh: int, kw: int) -> Tensor:
    """Window means; trailing windows average over their valid cells only.

    Each window mean is taken relative to the window's first cell, which
    keeps constant windows bit-exact.
    """
    if x.data.ndim != 3:
        raise DimensionError("avg_pool2d expects C x H x W")
    if kh < 1 or kw < 1:
        raise ContractError("pooling kernel extents must be >= 1")
    _, h, w = x.shape
    counts = np.outer(_window_counts(h, kh), _window_counts(w, kw)).astype(np.float64)
    ref = x.data[:, ::kh, ::kw]
    delta = x.data - _broadcast_windows(ref, kh, kw, h, w)
    out = ref + _window_sum(delta, kh, kw) / counts

    def backward(g):
        return (_broadcast_windows(g / counts, kh, kw, h, w),)

    return Tensor._result(out, (x,), backward)


def unpool_broadcast(x: Tensor, kh: int, kw: int, h: int, w: int) -> Tensor:
    """Copy each pooled cell back onto every cell of its pooling window."""
    if x.data.ndim != 3:
        raise DimensionError("unpool_broadcast expects C x h x w")
    if x.shape[1] != -(-h // kh) or x.shape[2] != -(-w // kw):
        raise DimensionError(
            f"pooled extents {x.shape[1:]} inconsistent with target {h}x{w} under kernel ({kh},{kw})"
        )
    out = _broadcast_windows(x.data, kh, kw, h, w)
    return Tensor._result(out, (x,), lambda g: (_window_sum(g, kh, kw),))


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine parameters must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        red = tuple(range(g.ndim - 1))
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return Tensor._result(out, (x, gamma, beta), backward)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each channel of a C x H x W map over its spatial cells, then scale and shift."""
    if x.data.ndim != 3:
        raise DimensionError("instance_norm expects C x H x W")
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"instance_norm affine parameters must have shape ({c},)")
    flat = x.data.reshape(c, -1)
    mu = flat.mean(axis=1, keepdims=True)
    xc = flat - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    out = (xhat * gamma.data[:, None] + beta.data[:, None]).reshape(x.shape)
    gd = gamma.data[:, None]

    def backward(g):
        g2 = g.reshape(c, -1)
        gxhat = g2 * gd
        gx = inv * (gxhat - gxhat.mean(axis=1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=1, keepdims=True))
        return gx.reshape(x.shape), (g2 * xhat).sum(axis=1), g2.sum(axis=1)

    return Tensor._result(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    analytic: float
    numeric: float
    checked: int = 0

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    indices: Optional[Sequence[int]] = None,
    strict: bool = True,
) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f(x)`` against central differences.

    ``indices`` restricts the comparison to a subset of flat positions, which
    keeps checks over large parameter tensors affordable. ``strict=False``
    permits step sizes outside [1e-7, 1e-3] (used to demonstrate truncation
    error).
    """
    if strict and not (1e-7 <= eps <= 1e-3):
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    if not x.requires_grad:
        raise ContractError("grad_check needs x.requires_grad=True")

    x.grad = None
    out = f(x)
    if out.size != 1:
        raise ContractError(f"f must return a scalar, got shape {out.shape}")
    out.backward()
    analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    x.grad = None

    flat = x.data.reshape(-1)
    idx = range(x.size) if indices is None else [int(i) for i in indices]
    worst = (0.0, 0, 0.0, 0.0)
    count = 0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x).item()
        flat[i] = orig - eps
        fm = f(x).item()
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * eps)
        a = analytic[i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if not math.isfinite(rel):
            rel = math.inf
        if rel > worst[0] or count == 0:
            worst = (rel, i, a, numeric)
        count += 1
    return GradCheckReport(float(worst[0]), int(worst[1]), float(worst[2]), float(worst[3]), count)
