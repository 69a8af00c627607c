"""Rigid-body poses, boxes and point clouds.

Poses are 4x4 homogeneous transforms mapping vehicle-frame coordinates to
world-frame coordinates (meters). All types are immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_ORTHO_STRICT = 1e-9
_ORTHO_REPAIR = 1e-6


class PoseError(ValueError):
    pass


class Pose:
    """Vehicle-to-world rigid transform.

    The rotation block must be orthonormal with determinant +1. Blocks
    within 1e-6 of orthonormal (e.g. file round-trip noise) are repaired by
    polar decomposition; anything worse is rejected.
    """

    __slots__ = ("matrix",)

    def __init__(self, matrix):
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise PoseError(f"pose matrix must be 4x4, got {m.shape}")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise PoseError(f"pose last row must be (0,0,0,1), got {m[3]}")
        if not np.isfinite(m).all():
            raise PoseError("pose matrix contains non-finite entries")
        r = m[:3, :3]
        err = np.abs(r @ r.T - np.eye(3)).max()
        if err > _ORTHO_STRICT:
            if err > _ORTHO_REPAIR:
                raise PoseError(f"rotation block not orthonormal (error {err:.3e})")
            u, _, vt = np.linalg.svd(r)
            r = u @ vt
            m = m.copy()
            m[:3, :3] = r
        if np.linalg.det(r) < 0:
            raise PoseError("rotation block has determinant -1 (reflection)")
        m = np.ascontiguousarray(m)
        m.setflags(write=False)
        self.matrix = m

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(4))

    @staticmethod
    def from_rt(rotation, translation) -> "Pose":
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = translation
        return Pose(m)

    @staticmethod
    def translation(x: float, y: float, z: float = 0.0) -> "Pose":
        m = np.eye(4)
        m[:3, 3] = (x, y, z)
        return Pose(m)

    @staticmethod
    def rot_z(angle: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        c, s = math.cos(angle), math.sin(angle)
        m = np.eye(4)
        m[0, 0], m[0, 1] = c, -s
        m[1, 0], m[1, 1] = s, c
        m[:3, 3] = translation
        return Pose(m)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def xyz(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def __repr__(self):
        t = self.xyz
        return f"Pose(t=({t[0]:.3f}, {t[1]:.3f}, {t[2]:.3f}))"


def invert(p: Pose) -> Pose:
    r_t = p.matrix[:3, :3].T
    m = np.eye(4)
    m[:3, :3] = r_t
    m[:3, 3] = -r_t @ p.matrix[:3, 3]
    return Pose(m)


def compose(a: Pose, b: Pose) -> Pose:
    """Transform applying b first, then a (matrix product a @ b)."""
    return Pose(a.matrix @ b.matrix)


def relative_transform(g_prev: Pose, g_cur: Pose) -> Pose:
    """Map current-vehicle-frame coordinates into the previous vehicle frame.

    This is the inverse-sampling map used to warp history BEV maps:
    a point expressed in the current frame is first lifted to world
    coordinates through g_cur, then dropped into the previous frame
    through g_prev^-1.
    """
    return compose(invert(g_prev), g_cur)


def transform_points(p: Pose, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected Nx3 points, got shape {pts.shape}")
    return pts @ p.matrix[:3, :3].T + p.matrix[:3, 3]


def wrap_heading(h: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    w = math.fmod(h + math.pi, 2.0 * math.pi)
    if w < 0:
        w += 2.0 * math.pi
    return w - math.pi


@dataclass(frozen=True)
class PointCloud:
    """Points in the sensor-vehicle frame, meters. Empty frames are legal."""

    points: np.ndarray
    timestamp: float
    intensity: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if inten.shape[0] != pts.shape[0]:
                raise ValueError("intensity length does not match point count")
            object.__setattr__(self, "intensity", inten)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class Box3D:
    """7-DoF box: center (m), size (length, width, height > 0), heading [-pi, pi)."""

    center: np.ndarray
    size: np.ndarray
    heading: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        s = np.asarray(self.size, dtype=np.float64).reshape(3)
        if not (np.isfinite(c).all() and np.isfinite(s).all()):
            raise ValueError("box has non-finite parameters")
        if (s <= 0).any():
            raise ValueError(f"box sizes must be strictly positive, got {s}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)
        object.__setattr__(self, "heading", wrap_heading(float(self.heading)))

    def bev_corners(self) -> np.ndarray:
        """4x2 corners of the BEV footprint, counter-clockwise."""
        l, w = self.size[0], self.size[1]
        c, s = math.cos(self.heading), math.sin(self.heading)
        local = np.array(
            [[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]]
        )
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]

    def transformed(self, p: Pose) -> "Box3D":
        """The same box expressed through pose p (vehicle->world or inverse)."""
        c = transform_points(p, self.center[None, :])[0]
        yaw = math.atan2(p.matrix[1, 0], p.matrix[0, 0])
        return Box3D(c, self.size.copy(), self.heading + yaw)
