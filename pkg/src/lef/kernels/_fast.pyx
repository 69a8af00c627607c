# cython: language_level=3
"""Compiled twins of the hot kernels in pure.py.

Must stay bit-identical to the numpy fallback: same IEEE double operations
in the same order, compiled with -ffp-contract=off (no FMA contraction).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor, INFINITY

cnp.import_array()


def segment_max(double[:, ::1] data, long long[::1] starts, long long[::1] ends):
    cdef Py_ssize_t k = starts.shape[0]
    cdef Py_ssize_t d = data.shape[1]
    values_arr = np.empty((k, d), dtype=np.float64)
    argrows_arr = np.empty((k, d), dtype=np.int64)
    cdef double[:, ::1] values = values_arr
    cdef long long[:, ::1] argrows = argrows_arr
    cdef Py_ssize_t i, r, c, s, e
    cdef double v
    for i in range(k):
        s = starts[i]
        e = ends[i]
        if e <= s:
            raise ValueError(f"segment {i} is empty ({s}:{e})")
        for c in range(d):
            values[i, c] = data[s, c]
            argrows[i, c] = s
        for r in range(s + 1, e):
            for c in range(d):
                v = data[r, c]
                if v > values[i, c]:
                    values[i, c] = v
                    argrows[i, c] = r
    return values_arr, argrows_arr


def inverse_source_map(double[:, ::1] transform, Py_ssize_t h, Py_ssize_t w,
                       double cell, double half):
    src_arr = np.empty(h * w, dtype=np.int64)
    inb_arr = np.empty(h * w, dtype=bool)
    cdef long long[::1] src = src_arr
    cdef cnp.uint8_t[::1] inb = inb_arr.view(np.uint8)
    cdef double m00 = transform[0, 0], m01 = transform[0, 1], m03 = transform[0, 3]
    cdef double m10 = transform[1, 0], m11 = transform[1, 1], m13 = transform[1, 3]
    cdef Py_ssize_t r, c, i
    cdef double gx, gy, sx, sy, sr, sc
    i = 0
    for r in range(h):
        gx = (<double> r + 0.5) * cell - half
        for c in range(w):
            gy = (<double> c + 0.5) * cell - half
            sx = m00 * gx + m01 * gy + m03
            sy = m10 * gx + m11 * gy + m13
            sr = floor((sx + half) / cell)
            sc = floor((sy + half) / cell)
            if sr >= 0 and sr < h and sc >= 0 and sc < w:
                src[i] = <long long> (sr * w + sc)
                inb[i] = 1
            else:
                src[i] = -1
                inb[i] = 0
            i += 1
    return src_arr, inb_arr


def zbuffer_keep(long long[::1] bins, double[::1] ranges, Py_ssize_t n_bins):
    cdef Py_ssize_t n = bins.shape[0]
    keep_arr = np.zeros(n, dtype=bool)
    if n == 0:
        return keep_arr
    cdef cnp.uint8_t[::1] keep = keep_arr.view(np.uint8)
    best_range_arr = np.full(n_bins, INFINITY, dtype=np.float64)
    best_idx_arr = np.full(n_bins, -1, dtype=np.int64)
    cdef double[::1] best_range = best_range_arr
    cdef long long[::1] best_idx = best_idx_arr
    cdef Py_ssize_t i
    cdef long long b
    for i in range(n):
        b = bins[i]
        if b < 0 or b >= n_bins:
            raise ValueError("bin id out of range")
        if ranges[i] < best_range[b]:
            best_range[b] = ranges[i]
            best_idx[b] = i
    for i in range(n_bins):
        if best_idx[i] >= 0:
            keep[best_idx[i]] = 1
    return keep_arr
