"""Pure numpy implementations of the hot kernels.

These are the reference semantics; the compiled twins in _fast.pyx must
produce bit-identical outputs (same IEEE ops in the same order, no FMA).
"""

from __future__ import annotations

import numpy as np


def segment_max(data: np.ndarray, starts: np.ndarray, ends: np.ndarray):
    """Column-wise max over contiguous row segments.

    Returns (values (K, d), argrows (K, d) int64). Ties keep the earliest
    row. Segments must be non-empty.
    """
    data = np.ascontiguousarray(data, dtype=np.float64)
    k = starts.shape[0]
    d = data.shape[1]
    values = np.empty((k, d), dtype=np.float64)
    argrows = np.empty((k, d), dtype=np.int64)
    for i in range(k):
        s, e = starts[i], ends[i]
        if e <= s:
            raise ValueError(f"segment {i} is empty ({s}:{e})")
        block = data[s:e]
        values[i] = block.max(axis=0)
        argrows[i] = s + block.argmax(axis=0)
    return values, argrows


def inverse_source_map(
    transform: np.ndarray, h: int, w: int, cell: float, half: float
):
    """Per-target-cell source lookup for nearest-neighbor BEV warping.

    For each target cell (r, c), the cell center (x, y, 0) is pushed
    through the 4x4 `transform`; the source cell containing the result is
    returned as a flat index, or -1 when it falls outside [0,h) x [0,w).

    Returns (src_flat (h*w,) int64, in_bounds (h*w,) bool).
    """
    m = np.ascontiguousarray(transform, dtype=np.float64)
    xs = (np.arange(h, dtype=np.float64) + 0.5) * cell - half
    ys = (np.arange(w, dtype=np.float64) + 0.5) * cell - half
    gx = np.repeat(xs, w)
    gy = np.tile(ys, h)
    sx = m[0, 0] * gx + m[0, 1] * gy + m[0, 3]
    sy = m[1, 0] * gx + m[1, 1] * gy + m[1, 3]
    sr = np.floor((sx + half) / cell)
    sc = np.floor((sy + half) / cell)
    inb = (sr >= 0) & (sr < h) & (sc >= 0) & (sc < w)
    src = np.where(inb, (sr * w + sc).astype(np.int64), -1)
    return src, inb


def zbuffer_keep(bins: np.ndarray, ranges: np.ndarray, n_bins: int) -> np.ndarray:
    """Keep the nearest point per spherical bin (ties: lowest index).

    `n_bins` bounds the bin ids; it sizes the scratch table in the
    compiled twin and is validated here for parity.

    Returns a boolean keep mask over the points.
    """
    n = bins.shape[0]
    keep = np.zeros(n, dtype=bool)
    if n == 0:
        return keep
    if bins.min() < 0 or bins.max() >= n_bins:
        raise ValueError("bin id out of range")
    order = np.lexsort((np.arange(n), ranges, bins))
    ob = bins[order]
    first = np.ones(n, dtype=bool)
    first[1:] = ob[1:] != ob[:-1]
    keep[order[first]] = True
    return keep
