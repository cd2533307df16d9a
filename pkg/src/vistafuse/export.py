"""Artifact writers: attention CSV, binary PGM heatmaps, loss traces, fused maps."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence, Tuple, Union

import numpy as np

from .losses import BoxFootprint, LossReport, select_box_rows
from .ndcore import Tensor

PathLike = Union[str, Path]
TRACE_FIELDS = ("step", "L_cls", "L_reg", "L_var", "L_target", "L_total")


def attention_heatmap(A: Tensor, boxes: Sequence[BoxFootprint], centers, source_extent: Tuple[int, int]) -> np.ndarray:
    """Mean attention row over queries inside any box, laid out on the pooled source map.

    Falls back to all rows when no query lies in a box.
    """
    rows = select_box_rows(A, boxes, centers)
    picked = np.unique(np.concatenate(rows)) if rows and any(len(r) for r in rows) else np.arange(A.shape[0])
    h, w = source_extent
    if h * w != A.shape[1]:
        raise ValueError(f"source extent {h}x{w} does not match {A.shape[1]} attention columns")
    return A.data[picked].mean(axis=0).reshape(h, w)


def to_gray(image: np.ndarray) -> np.ndarray:
    """Min-max normalize to 0..255; a flat map becomes all zeros."""
    lo, hi = float(image.min()), float(image.max())
    if hi <= lo:
        return np.zeros(image.shape, dtype=np.uint8)
    return np.rint((image - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path: PathLike, image: np.ndarray) -> None:
    gray = to_gray(np.asarray(image, dtype=np.float64))
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes())


def read_pgm(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode("ascii"))
        pos = end
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    return np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


def write_attention_csv(path: PathLike, A: Tensor) -> None:
    n, m = A.shape
    rows, cols = np.divmod(np.arange(n * m), m)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(("row", "col", "weight"))
        out.writerows(zip(rows.tolist(), cols.tolist(), (repr(v) for v in A.data.reshape(-1).tolist())))


def write_map_csv(path: PathLike, features: Tensor) -> None:
    """``channel,row,col,value`` for every cell of a C x H x W map."""
    c, h, w = features.shape
    idx = np.indices((c, h, w)).reshape(3, -1).T
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(("channel", "row", "col", "value"))
        out.writerows((int(a), int(b), int(d), repr(v)) for (a, b, d), v in zip(idx, features.data.reshape(-1).tolist()))


def write_trace_csv(path: PathLike, trace: Iterable[LossReport]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(TRACE_FIELDS)
        for i, r in enumerate(trace):
            out.writerow((i, repr(r.L_cls), repr(r.L_reg), repr(r.L_var), repr(r.L_target), repr(r.L_total)))


def read_trace_csv(path: PathLike) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([[float(r[k]) for k in TRACE_FIELDS[1:]] for r in rows]).reshape(-1, len(TRACE_FIELDS) - 1)
