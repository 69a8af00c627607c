"""The recurrent fusion step: carry segmented foreground pillars forward,
calibrate them into the current frame, fuse with current pillar features,
run the backbone, and detect.

Pipeline per step (late-to-early):
  1. voxelize + encode the current cloud -> current sparse pillars
  2. if history exists: fold the timestamp-offset encoding into the carried
     foreground features, densify, inverse-calibrate into the current
     frame, and align with the densified current map (2d -> d reduction)
  3. sparsify the aligned map -> fused query tokens
  4. one window-attention fusion block (self / cross / mix keys)
  5. backbone: N window self-attention blocks
  6. heads: foreground scores, center heatmap, box regression
  7. foreground gate -> new carried state (detached: recurrence never
     backpropagates across steps)

Alternative strategies for controlled comparisons: raw point stacking with
a per-point time channel (single pass over pose-compensated clouds), and
deep-feature fusion after the backbone just before the heads.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from lef.attention import AttentionBlock, AttentionVariant
from lef.calibration import inverse_calibrate, temporal_align
from lef.detection import DetectionHead, HeadOutput, SegmentationHead, decode
from lef.geometry import PointCloud, Pose, invert, transform_points
from lef.numerics import Tensor, concat, no_grad, stop_gradient
from lef.numerics.nn import Linear, Mlp, Module
from lef.pillars import (
    BevMap,
    GridSpec,
    PillarEncoder,
    SparsePillarSet,
    densify,
    sparsify,
    voxelize,
)


class FusionStrategy(enum.Enum):
    LATE_TO_EARLY = "l2e"
    EARLY_TO_EARLY = "e2e"
    LATE_TO_LATE = "l2l"


@dataclass(frozen=True)
class FusionConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    d: int = 32
    heads: int = 4
    window: int = 10
    backbone_depth: int = 2
    variant: AttentionVariant = AttentionVariant.SELF
    strategy: FusionStrategy = FusionStrategy.LATE_TO_EARLY
    fg_threshold: float = 0.5
    fg_cap: int = 2000
    time_encoding_dims: int = 32
    use_ica: bool = True  # ablation arm: skip the warp, align uncalibrated
    bilinear: bool = False
    decode_score_thresh: float = 0.3
    decode_k_max: int = 32

    def __post_init__(self):
        if not (0.0 < self.fg_threshold < 1.0):
            raise ValueError("fg_threshold must lie in (0, 1)")
        if self.fg_cap < 1:
            raise ValueError("fg_cap must be >= 1")
        if self.time_encoding_dims % 2:
            raise ValueError("time_encoding_dims must be even")


@dataclass(frozen=True)
class FusionState:
    """Carried recurrence state: detached foreground pillars + timestamp."""

    foreground: SparsePillarSet
    pose: Pose
    timestamp: float
    generation: int = 0


@dataclass
class StepStats:
    """Cardinalities of one fusion step (sparsity-bound bookkeeping)."""

    n_current: int  # current-frame pillars before fusion
    k_history: int  # carried foreground pillars
    k_calibrated: int  # history pillars surviving calibration
    u_union: int  # fused tokens after alignment


@dataclass
class FuseResult:
    features: SparsePillarSet  # backbone-output tokens
    detections: list  # [(Box3D, score)]
    state: FusionState
    head: HeadOutput
    seg_scores: Tensor
    stats: StepStats


def time_offset_encoding(dt: float, dims: int) -> np.ndarray:
    """Sinusoidal encoding of a timestamp offset, in 10 Hz frame units."""
    if dims % 2:
        raise ValueError(f"encoding width must be even, got {dims}")
    if dt < 0:
        raise ValueError(f"history must precede the current frame (dt={dt})")
    pos = dt / 0.1
    k = np.arange(dims // 2)
    omega = 10000.0 ** (2.0 * k / dims)
    out = np.empty(dims)
    out[0::2] = np.sin(pos / omega)
    out[1::2] = np.cos(pos / omega)
    return out


class LefModel(Module):
    """All trainable pieces of the pipeline, one strategy per instance."""

    def __init__(self, cfg: FusionConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        d = cfg.d
        extra = 1 if cfg.strategy is FusionStrategy.EARLY_TO_EARLY else 0
        self.encoder = PillarEncoder(d, rng, extra_feats=extra)
        self.time_project = Linear(d + cfg.time_encoding_dims, d, rng)
        self.reducer = Mlp(2 * d, d, d, rng)
        self.fusion_attn = AttentionBlock(d, cfg.heads, cfg.window, rng)
        self.backbone = [
            AttentionBlock(d, cfg.heads, cfg.window, rng)
            for _ in range(cfg.backbone_depth)
        ]
        self.seg_head = SegmentationHead(d, rng)
        self.det_head = DetectionHead(d, rng)
        self.cfg = cfg


def backbone_stub(tokens: SparsePillarSet, blocks: list[AttentionBlock]) -> SparsePillarSet:
    """N window self-attention blocks; coords and count are preserved."""
    for block in blocks:
        tokens = block(tokens, AttentionVariant.SELF)
    return tokens


def foreground_segment(
    features: SparsePillarSet, scores: Tensor, threshold: float, cap: int
) -> tuple[np.ndarray, SparsePillarSet]:
    """Gate pillars by foreground score.

    Keeps score > threshold, then truncates to the top-`cap` by score with
    row-major coordinate tie-breaks. Kept features are the input embeddings,
    unmodified. Returns (kept indices, foreground set).
    """
    s = scores.data
    keep = np.flatnonzero(s > threshold)
    if keep.size > cap:
        coords = features.coords[keep]
        order = np.lexsort((coords[:, 1], coords[:, 0], -s[keep]))
        keep = keep[order[:cap]]
        keep = np.sort(keep)
    if keep.size == 0:
        return keep, SparsePillarSet.empty(features.d)
    from lef.numerics import gather_rows

    return keep, SparsePillarSet(features.coords[keep], gather_rows(features.features, keep))


def _encode_frame(model: LefModel, cloud: PointCloud, grid: GridSpec,
                  extras: np.ndarray | None = None) -> SparsePillarSet:
    return model.encoder(voxelize(cloud, grid, extras=extras), grid)


def _history_map(model: LefModel, state: FusionState, dt: float, grid: GridSpec) -> BevMap:
    """Fold the time offset into carried features and densify them."""
    cfg = model.cfg
    fg = state.foreground
    te = time_offset_encoding(dt, cfg.time_encoding_dims)
    te_rows = Tensor(np.repeat(te[None, :], len(fg), axis=0))
    folded = model.time_project(concat([fg.features, te_rows], axis=1))
    return densify(SparsePillarSet(fg.coords, folded), grid)


def fuse_step(
    state: FusionState | None,
    cloud: PointCloud,
    pose: Pose,
    timestamp: float,
    model: LefModel,
    want_detections: bool = True,
) -> FuseResult:
    """One recurrent late-to-early (or late-to-late) pass."""
    cfg = model.cfg
    grid = cfg.grid
    if state is not None and timestamp <= state.timestamp:
        raise ValueError(
            f"timestamps must be strictly increasing: {timestamp} after {state.timestamp}"
        )
    if cfg.strategy is FusionStrategy.EARLY_TO_EARLY:
        raise ValueError("point-stacking strategy has no recurrent step; use run_sequence")

    current = _encode_frame(model, cloud, grid)
    n_current = len(current)
    late_fusion = cfg.strategy is FusionStrategy.LATE_TO_LATE

    hist_tokens: SparsePillarSet | None = None
    k_calibrated = 0

    def _align_with_history(cur_set: SparsePillarSet):
        nonlocal hist_tokens, k_calibrated
        hist_map = _history_map(model, state, timestamp - state.timestamp, grid)
        if cfg.use_ica:
            calibrated = inverse_calibrate(
                hist_map, state.pose, pose, grid, bilinear=cfg.bilinear
            )
        else:
            calibrated = hist_map
        k_calibrated = int(calibrated.mask.sum())
        hist_tokens = sparsify(calibrated)
        fused_map = temporal_align(calibrated, densify(cur_set, grid), model.reducer)
        return sparsify(fused_map)

    if late_fusion:
        # backbone sees single-frame tokens; history fuses just before heads
        tokens = backbone_stub(current, model.backbone)
        if state is not None and len(state.foreground):
            tokens = _align_with_history(tokens)
        u_union = len(tokens)
    else:
        if state is not None and len(state.foreground):
            fused = _align_with_history(current)
        else:
            fused = current
        u_union = len(fused)
        fused = model.fusion_attn(fused, cfg.variant, hist_tokens)
        tokens = backbone_stub(fused, model.backbone)

    k_history = len(state.foreground) if state is not None else 0
    stats = StepStats(n_current, k_history, k_calibrated, u_union)
    if not late_fusion and state is not None and len(state.foreground):
        _assert_sparsity_bounds(stats)

    seg_scores = model.seg_head(tokens)
    head = model.det_head(tokens)
    detections = (
        decode(head, grid, cfg.decode_k_max, cfg.decode_score_thresh)
        if want_detections
        else []
    )
    _, fg = foreground_segment(tokens, seg_scores, cfg.fg_threshold, cfg.fg_cap)
    new_state = FusionState(
        foreground=SparsePillarSet(fg.coords, stop_gradient(fg.features)),
        pose=pose,
        timestamp=timestamp,
        generation=(state.generation + 1) if state is not None else 1,
    )
    return FuseResult(tokens, detections, new_state, head, seg_scores, stats)


def _assert_sparsity_bounds(stats: StepStats) -> None:
    """The union mask can only add calibrated history cells to current cells."""
    if not (
        stats.n_current <= stats.u_union <= stats.n_current + stats.k_calibrated
    ):
        raise AssertionError(
            f"sparsity bound violated: N'={stats.n_current}, U={stats.u_union}, "
            f"K~={stats.k_calibrated}"
        )
    if stats.k_calibrated > stats.k_history:
        raise AssertionError(
            f"calibration must not invent cells: K~={stats.k_calibrated} "
            f"> K={stats.k_history}"
        )


def run_sequence(
    frames: list[tuple[PointCloud, Pose, float]],
    model: LefModel,
    state: FusionState | None = None,
    grad_last_only: bool = True,
    want_detections: bool = True,
) -> list[FuseResult]:
    """Drive a (sub)sequence through the configured strategy.

    For recurrent strategies, non-final passes run without gradient
    recording when grad_last_only is set (their influence on the final loss
    is cut by the stop-gradient boundary anyway). Point stacking processes
    everything in one pass and yields a single result.
    """
    cfg = model.cfg
    if cfg.strategy is FusionStrategy.EARLY_TO_EARLY:
        return [_run_stacked(frames, model, want_detections)]
    results = []
    for i, (cloud, pose, ts) in enumerate(frames):
        last = i == len(frames) - 1
        if grad_last_only and not last:
            with no_grad():
                res = fuse_step(state, cloud, pose, ts, model, want_detections=False)
        else:
            res = fuse_step(state, cloud, pose, ts, model, want_detections=want_detections)
        state = res.state
        results.append(res)
    return results


def _run_stacked(frames, model: LefModel, want_detections: bool) -> FuseResult:
    """Pose-compensated raw point stacking with a per-point age channel."""
    cfg = model.cfg
    grid = cfg.grid
    cloud_cur, pose_cur, ts_cur = frames[-1]
    inv_cur = invert(pose_cur)
    pts, inten, ages = [], [], []
    for cloud, pose, ts in frames:
        if len(cloud) == 0:
            continue
        world = transform_points(pose, cloud.points)
        local = transform_points(inv_cur, world)
        pts.append(local)
        inten.append(
            cloud.intensity if cloud.intensity is not None else np.zeros(len(cloud))
        )
        ages.append(np.full(len(cloud), ts_cur - ts))
    if pts:
        stacked = PointCloud(
            np.concatenate(pts), ts_cur, intensity=np.concatenate(inten)
        )
        extras = np.concatenate(ages)[:, None]
    else:
        stacked = PointCloud(np.zeros((0, 3)), ts_cur)
        extras = np.zeros((0, 1))
    tokens = _encode_frame(model, stacked, grid, extras=extras)
    n = len(tokens)
    tokens = model.fusion_attn(tokens, AttentionVariant.SELF)
    tokens = backbone_stub(tokens, model.backbone)
    seg_scores = model.seg_head(tokens)
    head = model.det_head(tokens)
    detections = (
        decode(head, grid, cfg.decode_k_max, cfg.decode_score_thresh)
        if want_detections
        else []
    )
    _, fg = foreground_segment(tokens, seg_scores, cfg.fg_threshold, cfg.fg_cap)
    state = FusionState(
        SparsePillarSet(fg.coords, stop_gradient(fg.features)), pose_cur, ts_cur, 1
    )
    return FuseResult(tokens, detections, state, head, seg_scores,
                      StepStats(n, 0, 0, n))
