"""Deterministic synthetic LiDAR world.

Generates multi-frame sequences with ego motion, static and moving boxes,
surface-sampled returns, spherical-bin occlusion, ground clutter, and exact
ground truth. Everything is driven by one xoshiro256** stream per sequence,
so a seed reproduces the sequence bit-exactly.

Occlusion model: candidate returns are binned by azimuth (0.5 deg) and
elevation (1.0 deg) around the sensor; only the nearest surface hit per bin
survives. This is a z-buffer, not ray casting: O(points) and deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from lef import kernels
from lef.geometry import Box3D, PointCloud, Pose, invert, transform_points, wrap_heading
from lef.rng import Rng

AZ_BIN_DEG = 0.5
EL_BIN_DEG = 1.0
RANGE_NOISE_SIGMA = 0.02
NOISE_CLIP_SIGMAS = 4.0

CLASS_SMALL, CLASS_MEDIUM, CLASS_LARGE = 0, 1, 2
CLASS_NAMES = {CLASS_SMALL: "small", CLASS_MEDIUM: "medium", CLASS_LARGE: "large"}

# (length, width, height) ranges per class; large = max dim beyond 7 m
DEFAULT_SIZE_RANGES = {
    CLASS_SMALL: ((0.6, 1.0), (0.6, 1.0), (1.5, 1.9)),
    CLASS_MEDIUM: ((4.0, 5.2), (1.8, 2.2), (1.4, 1.8)),
    CLASS_LARGE: ((8.0, 13.0), (2.4, 3.0), (2.8, 3.6)),
}

# speed buckets in m/s (0.2 / 1.0 / 3.0 / 10.0 boundaries, i.e. the usual
# 1 / 5 / 15 / 50 mph-ish breakpoints used for per-speed metrics)
SPEED_BUCKETS_MPS = (0.2, 1.0, 3.0, 10.0)
SPEED_BUCKET_NAMES = ("static", "slow", "medium", "fast", "very_fast")


def speed_bucket(speed_mps: float) -> int:
    for i, edge in enumerate(SPEED_BUCKETS_MPS):
        if speed_mps < edge:
            return i
    return len(SPEED_BUCKETS_MPS)


@dataclass(frozen=True)
class TrackState:
    """Constant-velocity box track in world coordinates."""

    track_id: int
    cls: int
    size: np.ndarray
    center0: np.ndarray  # world, at t=0
    velocity: np.ndarray  # world m/s (vz = 0)
    heading0: float

    def center_at(self, t: float) -> np.ndarray:
        return self.center0 + self.velocity * t

    @property
    def speed(self) -> float:
        return float(np.hypot(self.velocity[0], self.velocity[1]))


@dataclass(frozen=True)
class GtBox:
    box: Box3D  # vehicle frame of its own frame
    track_id: int
    cls: int
    speed: float


@dataclass(frozen=True)
class Frame:
    cloud: PointCloud
    pose: Pose
    timestamp: float
    gt: list[GtBox]
    visibility: dict[int, float] = field(default_factory=dict)


@dataclass(frozen=True)
class Sequence:
    frames: list[Frame]
    tracks: list[TrackState] = field(default_factory=list)
    # occlusion benchmarks carry per-frame boolean visibility masks over a
    # fixed reference grid per large box, keyed by track id
    ref_visibility: dict[int, np.ndarray] | None = None

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    n_static: int = 3
    n_moving: int = 2
    frames: int = 10
    frame_period: float = 0.1
    ego_speed: float = 3.0
    ego_yaw_rate: float = 0.0  # rad/s
    points_per_frame: int = 4000
    clutter_fraction: float = 0.5
    clutter_radius: tuple[float, float] = (2.5, 19.0)
    occlusion: bool = True
    placement_radius: tuple[float, float] = (5.0, 16.0)
    class_mix: tuple[int, ...] = (CLASS_MEDIUM, CLASS_LARGE)
    speed_range: tuple[float, float] = (0.5, 6.0)
    size_ranges: dict = field(default_factory=lambda: dict(DEFAULT_SIZE_RANGES))
    surface_density: float = 60.0  # points per m^2 at 10 m before occlusion
    intensity: float = 0.5
    # z origin sits at the sensor; the ground plane is sensor_height below it,
    # which spreads ground returns across elevation bins like a roof-mounted unit
    sensor_height: float = 2.0

    def __post_init__(self):
        if self.n_static < 0 or self.n_moving < 0 or self.frames < 1:
            raise ValueError("counts must be non-negative and frames >= 1")
        if self.frame_period <= 0:
            raise ValueError("frame period must be positive")


class PlacementError(RuntimeError):
    pass


def _ego_pose(cfg: SceneConfig, t: float) -> Pose:
    """Constant speed / constant yaw-rate trajectory starting at the origin."""
    w = cfg.ego_yaw_rate
    v = cfg.ego_speed
    if abs(w) < 1e-12:
        x, y, yaw = v * t, 0.0, 0.0
    else:
        yaw = w * t
        x = v / w * math.sin(yaw)
        y = v / w * (1.0 - math.cos(yaw))
    return Pose.rot_z(yaw, (x, y, 0.0))


def _boxes_overlap_bev(a_center, a_size, a_heading, b_center, b_size, b_heading,
                       margin: float = 0.5) -> bool:
    """Separating-axis test for two inflated BEV rectangles."""

    def corners(center, size, heading, m):
        l, w = size[0] + m, size[1] + m
        c, s = math.cos(heading), math.sin(heading)
        local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.asarray(center[:2])

    ca = corners(a_center, a_size, a_heading, margin)
    cb = corners(b_center, b_size, b_heading, margin)
    for rect in (ca, cb):
        for i in range(4):
            edge = rect[(i + 1) % 4] - rect[i]
            axis = np.array([-edge[1], edge[0]])
            pa = ca @ axis
            pb = cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def _place_tracks(cfg: SceneConfig, rng: Rng) -> list[TrackState]:
    tracks: list[TrackState] = []
    specs = [(False, cfg.class_mix[i % len(cfg.class_mix)]) for i in range(cfg.n_static)]
    specs += [(True, cfg.class_mix[i % len(cfg.class_mix)]) for i in range(cfg.n_moving)]
    for tid, (moving, cls) in enumerate(specs):
        ranges = cfg.size_ranges[cls]
        size = np.array([rng.uniform(*ranges[0]), rng.uniform(*ranges[1]), rng.uniform(*ranges[2])])
        placed = False
        for _ in range(1000):
            rad = rng.uniform(*cfg.placement_radius)
            ang = rng.uniform(0.0, 2.0 * math.pi)
            center = np.array(
                [rad * math.cos(ang), rad * math.sin(ang), size[2] / 2 - cfg.sensor_height]
            )
            heading = rng.uniform(-math.pi, math.pi)
            if moving:
                speed = rng.uniform(*cfg.speed_range)
                velocity = np.array([speed * math.cos(heading), speed * math.sin(heading), 0.0])
            else:
                velocity = np.zeros(3)
            clash = any(
                _boxes_overlap_bev(center, size, heading, t.center0, t.size, t.heading0)
                for t in tracks
            )
            if not clash:
                tracks.append(TrackState(tid, cls, size, center, velocity, heading))
                placed = True
                break
        if not placed:
            raise PlacementError(
                f"could not place box {tid} (class {CLASS_NAMES[cls]}) without overlap after 1000 tries"
            )
    return tracks


_FACES = (
    # (axis, sign, u-axis, v-axis): face plane normal along `axis` * sign
    (0, 1, 1, 2),
    (0, -1, 1, 2),
    (1, 1, 0, 2),
    (1, -1, 0, 2),
    (2, 1, 0, 1),  # roof
)


def _box_axes(heading: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])  # rows: box x,y,z in world


def _sample_box_surface(
    center: np.ndarray, size: np.ndarray, heading: float, sensor: np.ndarray,
    density: float, rng: Rng,
):
    """Uniform samples on sensor-facing faces, count ~ area / range^2."""
    axes = _box_axes(heading)
    pts = []
    for axis, sign, ua, va in _FACES:
        normal = axes[axis] * sign
        face_center = center + normal * (size[axis] / 2)
        to_sensor = sensor - face_center
        if float(normal @ to_sensor) <= 0.0:
            continue
        du, dv = size[ua], size[va]
        area = du * dv
        r2 = float(to_sensor @ to_sensor)
        n = int(round(density * area * 100.0 / max(r2, 1.0)))
        for _ in range(n):
            u = (rng.next_float() - 0.5) * du
            v = (rng.next_float() - 0.5) * dv
            pts.append(face_center + axes[ua] * u + axes[va] * v)
    if not pts:
        return np.zeros((0, 3))
    return np.array(pts)


def _spherical_bins(pts_vehicle: np.ndarray):
    """Azimuth-elevation bin id and range per point (sensor at origin)."""
    x, y, z = pts_vehicle[:, 0], pts_vehicle[:, 1], pts_vehicle[:, 2]
    rng_xy = np.hypot(x, y)
    ranges = np.sqrt(x * x + y * y + z * z)
    az = np.degrees(np.arctan2(y, x)) + 180.0
    el = np.degrees(np.arctan2(z, rng_xy)) + 90.0
    n_az = int(round(360.0 / AZ_BIN_DEG))
    n_el = int(round(180.0 / EL_BIN_DEG))
    az_i = np.minimum((az / AZ_BIN_DEG).astype(np.int64), n_az - 1)
    el_i = np.minimum((el / EL_BIN_DEG).astype(np.int64), n_el - 1)
    bins = az_i * n_el + el_i
    return bins, ranges, n_az * n_el


def _ground_clutter(cfg: SceneConfig, n: int, rng: Rng) -> np.ndarray:
    r0, r1 = cfg.clutter_radius
    z = 0.02 - cfg.sensor_height
    pts = np.zeros((n, 3))
    for i in range(n):
        u = rng.next_float()
        rad = math.sqrt(u * (r1 * r1 - r0 * r0) + r0 * r0)
        ang = rng.uniform(0.0, 2.0 * math.pi)
        pts[i] = (rad * math.cos(ang), rad * math.sin(ang), z)
    return pts


def generate(cfg: SceneConfig) -> Sequence:
    """Build a deterministic sequence from the config seed."""
    rng = Rng(cfg.seed)
    tracks = _place_tracks(cfg, rng)
    frames = []
    for fi in range(cfg.frames):
        t = fi * cfg.frame_period
        pose = _ego_pose(cfg, t)
        frames.append(_render_frame(cfg, tracks, pose, t, rng))
    return Sequence(frames, tracks)


def _render_frame(cfg: SceneConfig, tracks, pose: Pose, t: float, rng: Rng,
                  extra_world: np.ndarray | None = None,
                  visibility: dict[int, float] | None = None) -> Frame:
    sensor_world = pose.xyz.copy()
    surf_world = []
    for track in tracks:
        center = track.center_at(t)
        pts = _sample_box_surface(center, track.size, track.heading0, sensor_world,
                                  cfg.surface_density, rng)
        if pts.shape[0]:
            surf_world.append(pts)
    if extra_world is not None and extra_world.shape[0]:
        surf_world.append(extra_world)
    n_clutter = int(cfg.points_per_frame * cfg.clutter_fraction)
    clutter_local = _ground_clutter(cfg, n_clutter, rng)
    inv_pose = invert(pose)
    parts = [transform_points(inv_pose, p) for p in surf_world]
    parts.append(clutter_local)
    pts_vehicle = np.concatenate(parts, axis=0) if parts else np.zeros((0, 3))

    if cfg.occlusion and pts_vehicle.shape[0]:
        bins, ranges, n_bins = _spherical_bins(pts_vehicle)
        keep = kernels.zbuffer_keep(bins, ranges, n_bins)
        pts_vehicle = pts_vehicle[keep]

    # range noise along the ray, after visibility selection
    if pts_vehicle.shape[0]:
        ranges = np.sqrt((pts_vehicle**2).sum(axis=1))
        safe = np.maximum(ranges, 1e-9)
        noise = np.array(
            [rng.gauss(RANGE_NOISE_SIGMA, clip=NOISE_CLIP_SIGMAS) for _ in range(pts_vehicle.shape[0])]
        )
        pts_vehicle = pts_vehicle * (1.0 + noise / safe)[:, None]

    # cap to the per-frame budget with a deterministic stride subsample so
    # the surface/clutter composition survives the cut
    if pts_vehicle.shape[0] > cfg.points_per_frame:
        sel = np.unique(
            np.round(
                np.linspace(0, pts_vehicle.shape[0] - 1, cfg.points_per_frame)
            ).astype(np.int64)
        )
        pts_vehicle = pts_vehicle[sel]

    intensity = np.full(pts_vehicle.shape[0], cfg.intensity)
    cloud = PointCloud(pts_vehicle, timestamp=t, intensity=intensity)

    ego_yaw = math.atan2(pose.matrix[1, 0], pose.matrix[0, 0])
    gt = []
    for track in tracks:
        center_w = track.center_at(t)
        center_v = transform_points(inv_pose, center_w[None, :])[0]
        heading_v = wrap_heading(track.heading0 - ego_yaw)
        gt.append(
            GtBox(
                box=Box3D(center_v, track.size.copy(), heading_v),
                track_id=track.track_id,
                cls=track.cls,
                speed=track.speed,
            )
        )
    return Frame(cloud, pose, t, gt, visibility or {})


# ---------------------------------------------------------------------------
# occlusion benchmark


@dataclass(frozen=True)
class OcclusionBenchConfig:
    """Picket-fence layout: large boxes broadside to a straight ego path,
    partially hidden behind slat fences. Per-frame visibility stays low but
    the visible union accumulates as the ego slides past the gaps."""

    seed: int = 0
    frames: int = 16
    frame_period: float = 0.1
    ego_speed: float = 2.5
    n_large: int = 2  # one per side of the path
    large_size: tuple[float, float, float] = (12.0, 2.5, 3.0)
    box_distance: float = 14.0
    fence_distance: float = 7.0
    fence_period: float = 1.0
    fence_gap: float = 0.35
    fence_height: float = 2.8
    fence_thickness: float = 0.2
    fence_halfspan: float = 5.0
    occluders_on: bool = True
    points_per_frame: int = 3500
    clutter_fraction: float = 0.25
    clutter_radius: tuple[float, float] = (2.0, 6.0)
    surface_density: float = 60.0
    intensity: float = 0.5
    sensor_height: float = 2.0
    max_per_frame_visibility: float = 0.4
    min_union_visibility: float = 0.8
    union_window: int = 6
    ref_spacing: float = 0.15


class OcclusionLayoutError(RuntimeError):
    pass


def _fence_grid_points(cfg: OcclusionBenchConfig, side: int, phase: float) -> np.ndarray:
    """Dense deterministic samples on the sensor-facing side of each slat."""
    slat_w = cfg.fence_period - cfg.fence_gap
    y_face = side * (cfg.fence_distance - cfg.fence_thickness / 2)
    step = 0.03
    pts = []
    z0 = -cfg.sensor_height
    x0 = -cfg.fence_halfspan + phase
    while x0 < cfg.fence_halfspan:
        xs = np.arange(x0, min(x0 + slat_w, cfg.fence_halfspan), step)
        zs = np.arange(z0, z0 + cfg.fence_height, step)
        if xs.size and zs.size:
            gx, gz = np.meshgrid(xs, zs, indexing="ij")
            block = np.column_stack(
                [gx.ravel(), np.full(gx.size, y_face), gz.ravel()]
            )
            pts.append(block)
        x0 += cfg.fence_period
    return np.concatenate(pts, axis=0) if pts else np.zeros((0, 3))


def _face_reference_grid(track: TrackState, side: int, spacing: float) -> np.ndarray:
    """Fixed world-frame sample grid on the box face that looks at the path."""
    l, _, h = track.size
    y_face = track.center0[1] - side * track.size[1] / 2
    z_base = track.center0[2] - h / 2
    xs = np.arange(-l / 2 + spacing / 2, l / 2, spacing) + track.center0[0]
    zs = np.arange(spacing / 2, h, spacing) + z_base
    gx, gz = np.meshgrid(xs, zs, indexing="ij")
    return np.column_stack([gx.ravel(), np.full(gx.size, y_face), gz.ravel()])


def _visible_mask(ref_vehicle: np.ndarray, blockers_vehicle: np.ndarray) -> np.ndarray:
    """Which reference points win (or tie with a sibling) in their z-buffer bin."""
    n_ref = ref_vehicle.shape[0]
    combined = np.concatenate([ref_vehicle, blockers_vehicle], axis=0)
    bins, ranges, n_bins = _spherical_bins(combined)
    keep = kernels.zbuffer_keep(bins, ranges, n_bins)
    winner_of_bin = np.full(n_bins, -1, dtype=np.int64)
    winner_of_bin[bins[keep]] = np.flatnonzero(keep)
    return winner_of_bin[bins[:n_ref]] < n_ref


def occlusion_benchmark(cfg: OcclusionBenchConfig) -> Sequence:
    """Sequence whose large boxes satisfy the per-frame / union visibility
    contract, tagged with per-frame visibility ratios (and reference-point
    masks on the returned Sequence for union checks)."""
    attempts = [(0.0, cfg.fence_gap), (cfg.fence_period / 4, cfg.fence_gap),
                (cfg.fence_period / 2, cfg.fence_gap), (0.0, cfg.fence_gap + 0.05)]
    last_err = None
    for phase, gap in attempts:
        eff = OcclusionBenchConfig(
            **{**_cfg_dict(cfg), "fence_gap": gap}
        )
        try:
            return _build_occlusion_sequence(eff, phase)
        except OcclusionLayoutError as e:
            last_err = e
    raise OcclusionLayoutError(
        f"no fence layout satisfied the visibility contract: {last_err}"
    )


def _cfg_dict(cfg) -> dict:
    return {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}


def _build_occlusion_sequence(cfg: OcclusionBenchConfig, phase: float) -> Sequence:
    rng = Rng(cfg.seed)
    sides = [1, -1][: cfg.n_large]
    tracks = [
        TrackState(
            track_id=i,
            cls=CLASS_LARGE,
            size=np.array(cfg.large_size),
            center0=np.array(
                [0.0, side * cfg.box_distance, cfg.large_size[2] / 2 - cfg.sensor_height]
            ),
            velocity=np.zeros(3),
            heading0=0.0,
        )
        for i, side in enumerate(sides)
    ]
    fences = (
        [_fence_grid_points(cfg, side, phase) for side in sides]
        if cfg.occluders_on
        else [np.zeros((0, 3)) for _ in sides]
    )
    fence_all = np.concatenate(fences, axis=0) if fences else np.zeros((0, 3))
    refs = [_face_reference_grid(t, s, cfg.ref_spacing) for t, s in zip(tracks, sides)]

    scene = SceneConfig(
        seed=cfg.seed,
        n_static=0,
        n_moving=0,
        frames=cfg.frames,
        frame_period=cfg.frame_period,
        ego_speed=cfg.ego_speed,
        points_per_frame=cfg.points_per_frame,
        clutter_fraction=cfg.clutter_fraction,
        clutter_radius=cfg.clutter_radius,
        occlusion=True,
        surface_density=cfg.surface_density,
        intensity=cfg.intensity,
        sensor_height=cfg.sensor_height,
    )

    frames = []
    ref_visibility = {t.track_id: np.zeros((cfg.frames, r.shape[0]), dtype=bool)
                      for t, r in zip(tracks, refs)}
    for fi in range(cfg.frames):
        t = fi * cfg.frame_period
        pose = _ego_pose(scene, t)
        inv_pose = invert(pose)
        visibility = {}
        for track, ref in zip(tracks, refs):
            others = [r for tr, r in zip(tracks, refs) if tr is not track]
            blockers = np.concatenate([fence_all] + others, axis=0)
            mask = _visible_mask(
                transform_points(inv_pose, ref), transform_points(inv_pose, blockers)
            )
            ref_visibility[track.track_id][fi] = mask
            visibility[track.track_id] = float(mask.mean())
        frames.append(
            _render_frame(scene, tracks, pose, t, rng,
                          extra_world=fence_all, visibility=visibility)
        )

    if cfg.occluders_on:
        for tid, vis in ref_visibility.items():
            ratios = vis.mean(axis=1)
            if (ratios >= cfg.max_per_frame_visibility).any():
                raise OcclusionLayoutError(
                    f"track {tid}: per-frame visibility {ratios.max():.3f} "
                    f">= {cfg.max_per_frame_visibility}"
                )
            for s in range(cfg.frames - cfg.union_window + 1):
                union = vis[s : s + cfg.union_window].any(axis=0).mean()
                if union <= cfg.min_union_visibility:
                    raise OcclusionLayoutError(
                        f"track {tid}: union visibility {union:.3f} over frames "
                        f"{s}..{s + cfg.union_window - 1} <= {cfg.min_union_visibility}"
                    )
    return Sequence(frames, tracks, ref_visibility)
