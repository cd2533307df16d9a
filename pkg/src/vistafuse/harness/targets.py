"""Dense center-in-box target assignment on the BEV pillar grid."""

from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np

from ..losses import BoxFootprint
from ..voxelizer import PillarCenters


def assign_targets(boxes: Sequence[BoxFootprint], centers) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Label every pillar from the nearest box whose footprint contains its center.

    Returns ``(cls_targets, reg_targets, positive_mask)``: class index per
    pillar (-1 for background), ``(dx, dy, log w, log h)`` with offsets from
    pillar center to box center, and the boolean positive mask. Ties in
    distance go to the lower box index.
    """
    c = centers.centers if isinstance(centers, PillarCenters) else np.asarray(centers, dtype=np.float64)
    n = len(c)
    cls = np.full(n, -1, dtype=np.int64)
    reg = np.zeros((n, 4))
    if not boxes:
        return cls, reg, np.zeros(n, dtype=bool)

    bx = np.array([[b.x, b.y, b.w, b.h] for b in boxes])
    inside = np.stack([b.contains(c[:, 0], c[:, 1]) for b in boxes], axis=1)  # n x B
    dist = np.hypot(c[:, None, 0] - bx[None, :, 0], c[:, None, 1] - bx[None, :, 1])
    dist = np.where(inside, dist, np.inf)
    best = np.argmin(dist, axis=1)
    pos = inside.any(axis=1)

    chosen = bx[best[pos]]
    cls[pos] = np.array([boxes[i].class_id for i in best[pos]], dtype=np.int64)
    reg[pos, 0] = chosen[:, 0] - c[pos, 0]
    reg[pos, 1] = chosen[:, 1] - c[pos, 1]
    reg[pos, 2] = np.log(chosen[:, 2])
    reg[pos, 3] = np.log(chosen[:, 3])
    return cls, reg, pos
