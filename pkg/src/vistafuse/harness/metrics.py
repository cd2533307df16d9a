"""How concentrated the learned cross-view attention is on objects."""

from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np

from ..losses import BoxFootprint, select_box_rows
from ..vista import AttentionBundle


def object_cells(boxes: Sequence[BoxFootprint], cells_src: np.ndarray) -> np.ndarray:
    """Source cells whose ground-plane strip meets any box footprint.

    An RV cell spans ``[x_lo, x_hi]`` and the full y range, so it meets a
    box exactly when the x intervals overlap.
    """
    cells = np.asarray(cells_src, dtype=np.float64)
    mask = np.zeros(len(cells), dtype=bool)
    for b in boxes:
        mask |= (cells[:, 0] <= b.x + b.w / 2) & (cells[:, 1] >= b.x - b.w / 2)
    return mask


def attention_concentration(
    bundle: AttentionBundle,
    boxes: Sequence[BoxFootprint],
    centers_query,
    cells_src: np.ndarray,
) -> Tuple[float, float]:
    """``(in_box_mass, mean_row_max)`` over the query rows inside any box.

    Both numbers are averaged over the semantic and geometric attention maps.
    Returns NaNs when no query row falls inside a box.
    """
    on_obj = object_cells(boxes, cells_src)
    masses, maxima = [], []
    for a in (bundle.A_sem, bundle.A_geo):
        if a.shape[1] != len(on_obj):
            raise ValueError(f"attention has {a.shape[1]} columns but {len(on_obj)} source cells were given")
        rows = np.unique(np.concatenate([r for r in select_box_rows(a, boxes, centers_query)] or [np.zeros(0, int)]))
        if len(rows) == 0:
            return float("nan"), float("nan")
        sub = a.data[rows]
        masses.append(sub[:, on_obj].sum(axis=1).mean())
        maxima.append(sub.max(axis=1).mean())
    return float(np.mean(masses)), float(np.mean(maxima))
