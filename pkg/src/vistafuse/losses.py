"""Attention-variance constraint, focal / L1 target losses and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from .ndcore import DimensionError, Tensor, add, scale
from .voxelizer import PillarCenters

VAR_TARGETS = ("sem", "geo", "both")


@dataclass(frozen=True)
class BoxFootprint:
    """Axis-aligned ground-plane box: full extents (w along x, h along y) and center."""

    w: float
    h: float
    x: float
    y: float
    class_id: int = 0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got w={self.w}, h={self.h}")

    def contains(self, px, py):
        return (
            (self.x - self.w / 2 <= px)
            & (px <= self.x + self.w / 2)
            & (self.y - self.h / 2 <= py)
            & (py <= self.y + self.h / 2)
        )


@dataclass
class LossReport:
    L_cls: float
    L_reg: float
    L_var: float
    L_target: float
    L_total: float
    lambdas: tuple
    per_box_variances: List[float] = field(default_factory=list)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite([self.L_cls, self.L_reg, self.L_var, self.L_total])))


def _centers(centers) -> np.ndarray:
    return centers.centers if isinstance(centers, PillarCenters) else np.asarray(centers, dtype=np.float64)


def select_box_rows(A: Tensor, boxes: Sequence[BoxFootprint], centers) -> List[np.ndarray]:
    """Row indices of ``A`` whose pillar center lies inside each box (bounds inclusive)."""
    c = _centers(centers)
    if A.shape[0] != len(c):
        raise DimensionError(f"attention has {A.shape[0]} rows but {len(c)} pillar centers were given")
    return [np.flatnonzero(b.contains(c[:, 0], c[:, 1])) for b in boxes]


def _box_variances(a: np.ndarray, rows: List[np.ndarray]) -> List[float]:
    out = []
    for r in rows:
        if len(r):
            out.append(float(a[r].var(axis=1).mean()))
    return out


def variance_loss(A: Tensor, boxes: Sequence[BoxFootprint], centers) -> Tensor:
    """Negative mean (over non-empty boxes) of the mean population variance of their rows."""
    rows = [r for r in select_box_rows(A, boxes, centers) if len(r)]
    a = A.data
    shape = a.shape
    if not rows:
        return Tensor._result(np.array(0.0), (A,), lambda g: (np.zeros(shape),))
    m = shape[1]
    total = 0.0
    grad = np.zeros(shape)
    for r in rows:
        sub = a[r]
        centred = sub - sub.mean(axis=1, keepdims=True)
        total += (centred * centred).mean(axis=1).mean()
        grad[r] += centred * (2.0 / (m * len(r)))
    k = len(rows)
    grad *= -1.0 / k
    return Tensor._result(np.array(0.0 - total / k), (A,), lambda g: (grad * g,))


def _log_sigmoid(z: np.ndarray) -> np.ndarray:
    return -(np.maximum(-z, 0.0) + np.log1p(np.exp(-np.abs(z))))


def focal_loss(
    logits: Tensor,
    targets: np.ndarray,
    alpha: float = 0.25,
    gamma: float = 2.0,
    bg_scale: float = 1.0,
) -> Tensor:
    """Sigmoid focal loss over N x K logits, normalized by the positive count (min 1).

    ``targets`` holds a class index per row, -1 for background. ``bg_scale``
    reweights rows whose target is background.
    """
    if logits.data.ndim != 2:
        raise DimensionError("focal_loss expects N x K logits")
    n, k = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise DimensionError(f"targets must have shape ({n},), got {targets.shape}")
    if np.any(targets >= k) or np.any(targets < -1):
        raise ValueError("target class index out of range")
    onehot = np.zeros((n, k))
    pos = targets >= 0
    onehot[np.flatnonzero(pos), targets[pos]] = 1.0
    sign = 2.0 * onehot - 1.0
    alpha_t = np.where(onehot > 0, alpha, 1.0 - alpha)
    if bg_scale != 1.0:
        alpha_t = alpha_t * np.where(pos, 1.0, bg_scale)[:, None]
    norm = max(int(pos.sum()), 1)

    z = sign * logits.data
    log_p = _log_sigmoid(z)
    p = np.exp(log_p)
    q = np.exp(_log_sigmoid(-z))
    qg = q ** gamma
    value = -(alpha_t * qg * log_p).sum() / norm
    dz = alpha_t * qg * (gamma * p * log_p - q) / norm
    return Tensor._result(np.array(value), (logits,), lambda g: (g * sign * dz,))


def l1_loss(pred: Tensor, target: np.ndarray, positive_mask: np.ndarray) -> Tensor:
    """Mean absolute error over positive rows and all regression channels."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise DimensionError(f"target shape {target.shape} != prediction shape {pred.shape}")
    mask = np.asarray(positive_mask, dtype=bool).reshape(-1)
    if mask.shape[0] != pred.shape[0]:
        raise DimensionError("positive_mask length differs from prediction rows")
    count = int(mask.sum()) * pred.shape[1]
    if count == 0:
        return Tensor._result(np.array(0.0), (pred,), lambda g: (np.zeros(pred.shape),))
    diff = (pred.data - target) * mask[:, None]
    value = np.abs(diff).sum() / count
    grad = np.sign(diff) / count
    return Tensor._result(np.array(value), (pred,), lambda g: (g * grad,))


def _as_tensor(v: Union[Tensor, float]) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(float(v))


def total_loss(
    cls: Union[Tensor, float],
    reg: Union[Tensor, float],
    var_sem: Union[Tensor, float],
    var_geo: Optional[Union[Tensor, float]] = None,
    lambda_cls: float = 1.0,
    lambda_reg: float = 0.25,
    lambda_var: float = 1.0,
    var_target: str = "both",
    per_box_variances: Optional[List[float]] = None,
):
    """Weighted objective; returns ``(total tensor, LossReport)``.

    ``var_target`` picks which branch's variance term enters the total; with
    ``both`` the two terms are averaged. A single variance term can be passed
    as ``var_sem`` alone.
    """
    if var_target not in VAR_TARGETS:
        raise ValueError(f"var_target must be one of {VAR_TARGETS}, got {var_target!r}")
    cls_t, reg_t, sem_t = _as_tensor(cls), _as_tensor(reg), _as_tensor(var_sem)
    geo_t = sem_t if var_geo is None else _as_tensor(var_geo)
    if var_target == "sem":
        var = sem_t
    elif var_target == "geo":
        var = geo_t
    else:
        var = sem_t if geo_t is sem_t else scale(add(sem_t, geo_t), 0.5)

    target = add(scale(cls_t, lambda_cls), scale(reg_t, lambda_reg))
    total = add(target, scale(var, lambda_var))
    report = LossReport(
        L_cls=cls_t.item(),
        L_reg=reg_t.item(),
        L_var=var.item(),
        L_target=target.item(),
        L_total=total.item(),
        lambdas=(lambda_cls, lambda_reg, lambda_var),
        per_box_variances=list(per_box_variances or []),
    )
    return total, report
