"""Inverse calibration and temporal alignment of history BEV feature maps.

The history map lives in the previous vehicle frame. To express it in the
current frame we sample it backward: every current-frame cell center is
pushed through relative_transform(g_prev, g_cur) and the feature is read
from the history cell containing the result (nearest-neighbor, which
preserves exact feature values and mask semantics). Cells whose source
falls outside the grid, or onto an invalid history cell, are zero-padded
and masked false.
"""

from __future__ import annotations

import numpy as np

from lef import kernels
from lef.geometry import Pose, relative_transform
from lef.numerics import Tensor, concat, gather_rows, reshape, scatter_rows
from lef.numerics.nn import Mlp
from lef.pillars import BevMap, GridSpec


def _check_grid(m: BevMap, grid: GridSpec, name: str) -> None:
    if (m.h, m.w) != (grid.h, grid.w):
        raise ValueError(
            f"{name} map is {m.h}x{m.w} but grid resolves to {grid.h}x{grid.w}"
        )


def source_map(g_prev: Pose, g_cur: Pose, grid: GridSpec):
    """Flat source index and in-bounds flag per target cell (kernel entry)."""
    rel = relative_transform(g_prev, g_cur)
    return kernels.inverse_source_map(
        rel.matrix, grid.h, grid.w, grid.cell_m, grid.half
    )


def inverse_calibrate(
    hist: BevMap, g_prev: Pose, g_cur: Pose, grid: GridSpec, bilinear: bool = False
) -> BevMap:
    """Warp a history BEV map into the current vehicle frame."""
    _check_grid(hist, grid, "history")
    if bilinear:
        return _bilinear_calibrate(hist, g_prev, g_cur, grid)
    h, w, d = grid.h, grid.w, hist.d
    src, inb = source_map(g_prev, g_cur, grid)
    valid = inb.copy()
    hist_mask = hist.mask.reshape(-1)
    valid[inb] &= hist_mask[src[inb]]
    targets = np.flatnonzero(valid)
    feats = gather_rows(reshape(hist.features, (h * w, d)), src[targets])
    dense = scatter_rows(feats, targets, h * w)
    return BevMap(reshape(dense, (h, w, d)), valid.reshape(h, w))


def _bilinear_calibrate(hist: BevMap, g_prev: Pose, g_cur: Pose, grid: GridSpec) -> BevMap:
    """Bilinear sampling variant (config option; blurs mask semantics, so
    it is excluded from the exactness guarantees of the nearest rule)."""
    h, w, d = grid.h, grid.w, hist.d
    rel = relative_transform(g_prev, g_cur).matrix
    xs = (np.arange(h, dtype=np.float64) + 0.5) * grid.cell_m - grid.half
    ys = (np.arange(w, dtype=np.float64) + 0.5) * grid.cell_m - grid.half
    gx = np.repeat(xs, w)
    gy = np.tile(ys, h)
    sx = rel[0, 0] * gx + rel[0, 1] * gy + rel[0, 3]
    sy = rel[1, 0] * gx + rel[1, 1] * gy + rel[1, 3]
    u = (sx + grid.half) / grid.cell_m - 0.5
    v = (sy + grid.half) / grid.cell_m - 0.5
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    fu = u - u0
    fv = v - v0
    hist_flat = reshape(hist.features, (h * w, d))
    hist_mask = hist.mask.reshape(-1)
    acc = None
    weight_sum = np.zeros(h * w)
    for du, dv, wgt in (
        (0, 0, (1 - fu) * (1 - fv)),
        (0, 1, (1 - fu) * fv),
        (1, 0, fu * (1 - fv)),
        (1, 1, fu * fv),
    ):
        rr, cc = u0 + du, v0 + dv
        ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        flat = np.where(ok, rr * w + cc, 0)
        ok = ok & hist_mask[flat]
        wgt = np.where(ok, wgt, 0.0)
        weight_sum += wgt
        corner = gather_rows(hist_flat, flat)
        term = corner * Tensor(wgt[:, None].repeat(d, axis=1))
        acc = term if acc is None else acc + term
    mask = weight_sum > 0.0
    # renormalize by accumulated valid weight so partial corners don't dim
    scale = np.where(mask, 1.0 / np.maximum(weight_sum, 1e-12), 0.0)
    out = acc * Tensor(scale[:, None].repeat(d, axis=1))
    return BevMap(reshape(out, (h, w, d)), mask.reshape(h, w))


def temporal_align(calibrated_hist: BevMap, cur: BevMap, reducer: Mlp) -> BevMap:
    """Concatenate the calibrated history map with the current map and
    reduce 2d -> d per cell, on the union of their valid cells only.

    Cells outside the union mask stay exactly zero, preserving sparsity.
    """
    if calibrated_hist.d != cur.d:
        raise ValueError(f"channel mismatch: {calibrated_hist.d} vs {cur.d}")
    if (calibrated_hist.h, calibrated_hist.w) != (cur.h, cur.w):
        raise ValueError("history and current maps have different grids")
    h, w, d = cur.h, cur.w, cur.d
    union = calibrated_hist.mask | cur.mask
    flat = np.flatnonzero(union)
    hist_rows = gather_rows(reshape(calibrated_hist.features, (h * w, d)), flat)
    cur_rows = gather_rows(reshape(cur.features, (h * w, d)), flat)
    joint = concat([hist_rows, cur_rows], axis=1)
    reduced = reducer(joint)
    dense = scatter_rows(reduced, flat, h * w)
    return BevMap(reshape(dense, (h, w, d)), union)
