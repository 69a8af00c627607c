"""BEV pillar voxelization, per-pillar feature encoding, and the
sparse-set <-> dense-masked-map conversions.

Grid convention: square detection zone of side `range_m` centered on the
sensor, cells of side `cell_m`. Cell (r, c) covers
x in [r*cell - range/2, (r+1)*cell - range/2) and likewise for y with c;
points exactly on a boundary belong to the higher-index cell (floor rule).
Cell centers define the continuous <-> discrete mapping everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lef.geometry import PointCloud
from lef.numerics import Tensor, gather_rows, reshape, scatter_rows, segment_max
from lef.numerics.nn import Linear, Module
from lef.numerics import relu


@dataclass(frozen=True)
class GridSpec:
    """Square BEV grid. Desk-scale default is 40 m at 0.32 m cells (125x125)."""

    range_m: float = 40.0
    cell_m: float = 0.32

    def __post_init__(self):
        if self.cell_m <= 0 or self.range_m <= 0:
            raise ValueError("grid dimensions must be positive")
        if self.h < 1:
            raise ValueError("grid resolves to an empty cell array")

    @property
    def h(self) -> int:
        return int(round(self.range_m / self.cell_m))

    @property
    def w(self) -> int:
        return self.h

    @property
    def half(self) -> float:
        return self.range_m / 2.0

    def cell_of(self, xy: np.ndarray) -> np.ndarray:
        """Containing cell (r, c) per point; may fall out of [0,h) x [0,w)."""
        return np.floor((np.asarray(xy) + self.half) / self.cell_m).astype(np.int64)

    def centers_of(self, cells: np.ndarray) -> np.ndarray:
        """Cell-center coordinates in meters for (K, 2) integer cells."""
        return (np.asarray(cells, dtype=np.float64) + 0.5) * self.cell_m - self.half


class SparsePillarSet:
    """Coordinate-indexed set of d-dim pillar feature vectors.

    coords: (K, 2) int64 cell indices, unique; features: (K, d) Tensor.
    """

    __slots__ = ("coords", "features")

    def __init__(self, coords: np.ndarray, features: Tensor):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
        if not isinstance(features, Tensor):
            features = Tensor(features)
        if features.ndim != 2 or features.shape[0] != coords.shape[0]:
            raise ValueError(
                f"features {features.shape} do not match {coords.shape[0]} coords"
            )
        if coords.shape[0]:
            if coords.min() < 0:
                raise ValueError("negative pillar coordinates")
            if np.unique(coords[:, 0] << 32 | coords[:, 1]).size != coords.shape[0]:
                raise ValueError("pillar coordinates must be unique")
        self.coords = coords
        self.features = features

    def __len__(self):
        return self.coords.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @staticmethod
    def empty(d: int) -> "SparsePillarSet":
        return SparsePillarSet(np.zeros((0, 2), np.int64), Tensor(np.zeros((0, d))))


class BevMap:
    """Dense H x W x d feature grid with an H x W validity mask.

    Features are exactly zero wherever the mask is false.
    """

    __slots__ = ("features", "mask")

    def __init__(self, features: Tensor, mask: np.ndarray):
        if not isinstance(features, Tensor):
            features = Tensor(features)
        mask = np.asarray(mask, dtype=bool)
        if features.ndim != 3 or features.shape[:2] != mask.shape:
            raise ValueError(f"features {features.shape} do not match mask {mask.shape}")
        self.features = features
        self.mask = mask

    @property
    def h(self) -> int:
        return self.mask.shape[0]

    @property
    def w(self) -> int:
        return self.mask.shape[1]

    @property
    def d(self) -> int:
        return self.features.shape[2]

    def check_sparsity(self) -> None:
        """Assert the masked-zero invariant (test helper; O(HWd))."""
        off = self.features.data[~self.mask]
        if off.size and np.abs(off).max() != 0.0:
            raise AssertionError("BevMap has nonzero features outside its mask")


@dataclass(frozen=True)
class PillarBuckets:
    """Deterministic voxelization output: points grouped by cell.

    Points are sorted by (cell row, cell col, original index); segment i of
    the arrays is rows starts[i]:ends[i].
    """

    coords: np.ndarray  # (K, 2) int64, sorted row-major
    starts: np.ndarray  # (K,) int64
    ends: np.ndarray  # (K,) int64
    points: np.ndarray  # (P, 3) sorted
    intensity: np.ndarray  # (P,)
    extras: np.ndarray | None  # (P, e) optional per-point channels

    def __len__(self):
        return self.coords.shape[0]


def voxelize(pc: PointCloud, grid: GridSpec, extras: np.ndarray | None = None) -> PillarBuckets:
    """Bucket in-range points into BEV cells; out-of-range points are dropped."""
    pts = pc.points
    n = pts.shape[0]
    inten = pc.intensity if pc.intensity is not None else np.zeros(n)
    if extras is not None:
        extras = np.asarray(extras, dtype=np.float64).reshape(n, -1)
    cells = grid.cell_of(pts[:, :2])
    ok = (
        (cells[:, 0] >= 0)
        & (cells[:, 0] < grid.h)
        & (cells[:, 1] >= 0)
        & (cells[:, 1] < grid.w)
    )
    idx = np.flatnonzero(ok)
    cells = cells[idx]
    order = np.lexsort((idx, cells[:, 1], cells[:, 0]))
    cells = cells[order]
    sel = idx[order]
    if sel.size == 0:
        e = np.zeros((0, 0)) if extras is None else extras[:0]
        empty = np.zeros(0, np.int64)
        return PillarBuckets(
            np.zeros((0, 2), np.int64), empty, empty, pts[:0], inten[:0],
            None if extras is None else e,
        )
    boundary = np.ones(cells.shape[0], dtype=bool)
    boundary[1:] = (cells[1:] != cells[:-1]).any(axis=1)
    starts = np.flatnonzero(boundary).astype(np.int64)
    ends = np.append(starts[1:], cells.shape[0]).astype(np.int64)
    return PillarBuckets(
        coords=cells[boundary],
        starts=starts,
        ends=ends,
        points=pts[sel],
        intensity=inten[sel],
        extras=None if extras is None else extras[sel],
    )


class PillarEncoder(Module):
    """Per-point network + per-pillar max-pool (a small set-function encoder).

    Point inputs are (x, y, z offsets from the cell center, range,
    intensity), optionally extended with extra channels (e.g. a per-point
    time offset when stacking frames).
    """

    POINT_FEATS = 5

    def __init__(self, d: int, rng: np.random.Generator, extra_feats: int = 0):
        self.fc1 = Linear(self.POINT_FEATS + extra_feats, d, rng)
        self.fc2 = Linear(d, d, rng)
        self.d = d

    def point_features(self, buckets: PillarBuckets, grid: GridSpec) -> np.ndarray:
        p = buckets.points
        centers = grid.centers_of(
            np.repeat(
                buckets.coords,
                (buckets.ends - buckets.starts).astype(np.int64),
                axis=0,
            )
        )
        rng_col = np.sqrt((p**2).sum(axis=1))
        feats = np.column_stack(
            [p[:, 0] - centers[:, 0], p[:, 1] - centers[:, 1], p[:, 2], rng_col, buckets.intensity]
        )
        if buckets.extras is not None:
            feats = np.column_stack([feats, buckets.extras])
        return feats

    def __call__(self, buckets: PillarBuckets, grid: GridSpec) -> SparsePillarSet:
        if len(buckets) == 0:
            return SparsePillarSet.empty(self.d)
        x = Tensor(self.point_features(buckets, grid))
        h = relu(self.fc1(x))
        h = self.fc2(h)
        pooled = segment_max(h, buckets.starts, buckets.ends)
        return SparsePillarSet(buckets.coords, pooled)


def encode_pillars(buckets: PillarBuckets, encoder: PillarEncoder, grid: GridSpec) -> SparsePillarSet:
    return encoder(buckets, grid)


def densify(s: SparsePillarSet, grid: GridSpec) -> BevMap:
    """Scatter a sparse pillar set onto a dense masked map."""
    h, w = grid.h, grid.w
    if len(s) and (s.coords[:, 0].max() >= h or s.coords[:, 1].max() >= w):
        raise ValueError(
            f"pillar coords exceed grid {h}x{w}: max {s.coords.max(axis=0)}"
        )
    flat = s.coords[:, 0] * w + s.coords[:, 1]
    dense = scatter_rows(s.features, flat, h * w)
    mask = np.zeros(h * w, dtype=bool)
    mask[flat] = True
    return BevMap(reshape(dense, (h, w, s.d)), mask.reshape(h, w))


def sparsify(m: BevMap) -> SparsePillarSet:
    """One token per valid cell, in deterministic row-major coordinate order."""
    coords = np.argwhere(m.mask).astype(np.int64)
    flat = coords[:, 0] * m.w + coords[:, 1]
    feats = gather_rows(reshape(m.features, (m.h * m.w, m.d)), flat)
    return SparsePillarSet(coords, feats)
