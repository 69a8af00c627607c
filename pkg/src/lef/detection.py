"""Center-heatmap detection head, box decoding, losses, and AP evaluation.

The head predicts, per pillar token, an object-center score and an 8-channel
box regression (dx, dy, z, log l, log w, log h, sin heading, cos heading);
dx/dy are offsets from the cell center in cell units. Heading is supervised
through its sine/cosine to avoid the wrap discontinuity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from lef.geometry import Box3D
from lef.numerics import (
    Tensor,
    clip,
    gather_rows,
    log,
    mul,
    neg,
    power,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    sigmoid,
    smooth_l1,
    sub,
    where,
)
from lef.numerics.nn import Linear, Module
from lef.pillars import GridSpec, SparsePillarSet

PROB_EPS = 1e-6
BOX_REG_CHANNELS = 8


@dataclass
class HeadOutput:
    """Per-pillar head predictions, aligned with `coords`."""

    coords: np.ndarray  # (K, 2)
    heatmap: Tensor  # (K,) probabilities in (0, 1)
    box_reg: Tensor  # (K, 8)


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    seg: float
    center: float
    box: float

    @staticmethod
    def weights() -> tuple[float, float]:
        return 200.0, 10.0


class DetectionHead(Module):
    """Center heatmap + box regression on backbone output tokens."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.hm_hidden = Linear(d, d, rng)
        self.hm_out = Linear(d, 1, rng)
        self.box_hidden = Linear(d, d, rng)
        self.box_out = Linear(d, BOX_REG_CHANNELS, rng)
        # bias the heatmap toward background so early training is stable
        self.hm_out.bias.data = np.full(1, -math.log(9.0))

    def __call__(self, tokens: SparsePillarSet) -> HeadOutput:
        hm_logit = self.hm_out(relu(self.hm_hidden(tokens.features)))
        box = self.box_out(relu(self.box_hidden(tokens.features)))
        hm = sigmoid(reshape(hm_logit, (len(tokens),)))
        return HeadOutput(tokens.coords, hm, box)


class SegmentationHead(Module):
    """Per-pillar foreground logit."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.hidden = Linear(d, d, rng)
        self.out = Linear(d, 1, rng)
        self.out.bias.data = np.full(1, -math.log(9.0))

    def __call__(self, tokens: SparsePillarSet) -> Tensor:
        logit = self.out(relu(self.hidden(tokens.features)))
        return sigmoid(reshape(logit, (len(tokens),)))


# ---------------------------------------------------------------------------
# targets


def _in_bev_footprint(xy: np.ndarray, box: Box3D) -> np.ndarray:
    """Inclusive point-in-rotated-rectangle test for (N, 2) points."""
    c, s = math.cos(box.heading), math.sin(box.heading)
    rel = xy - box.center[:2]
    u = rel[:, 0] * c + rel[:, 1] * s
    v = -rel[:, 0] * s + rel[:, 1] * c
    return (np.abs(u) <= box.size[0] / 2) & (np.abs(v) <= box.size[1] / 2)


def seg_targets(pillars: SparsePillarSet, gt: list[Box3D], grid: GridSpec) -> np.ndarray:
    """Foreground flag per pillar: cell center inside any GT BEV footprint."""
    labels = np.zeros(len(pillars), dtype=bool)
    if len(pillars) == 0 or not gt:
        return labels
    centers = grid.centers_of(pillars.coords)
    for box in gt:
        labels |= _in_bev_footprint(centers, box)
    return labels


def gaussian_radius(box: Box3D, grid: GridSpec, min_overlap: float = 0.7) -> int:
    """CornerNet-style radius from the BEV footprint, floored at 2 cells."""
    h = box.size[1] / grid.cell_m
    w = box.size[0] / grid.cell_m
    a1 = 1.0
    b1 = h + w
    c1 = w * h * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 - math.sqrt(max(b1**2 - 4 * a1 * c1, 0.0))) / 2
    a2 = 4.0
    b2 = 2 * (h + w)
    c2 = (1 - min_overlap) * w * h
    r2 = (b2 - math.sqrt(max(b2**2 - 4 * a2 * c2, 0.0))) / 2
    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (h + w)
    c3 = (min_overlap - 1) * w * h
    r3 = (b3 + math.sqrt(max(b3**2 - 4 * a3 * c3, 0.0))) / (2 * a3)
    return max(2, int(min(r1, r2, r3)))


def center_targets(gt: list[Box3D], grid: GridSpec) -> np.ndarray:
    """Dense (H, W) heatmap: per-box Gaussians, elementwise max when they overlap."""
    hm = np.zeros((grid.h, grid.w))
    for box in gt:
        cell = grid.cell_of(box.center[None, :2])[0]
        r0, c0 = int(cell[0]), int(cell[1])
        if not (0 <= r0 < grid.h and 0 <= c0 < grid.w):
            continue
        rad = gaussian_radius(box, grid)
        sigma = (2 * rad + 1) / 6.0
        rr = np.arange(max(0, r0 - rad), min(grid.h, r0 + rad + 1))
        cc = np.arange(max(0, c0 - rad), min(grid.w, c0 + rad + 1))
        dr = (rr - r0)[:, None]
        dc = (cc - c0)[None, :]
        patch = np.exp(-(dr**2 + dc**2) / (2 * sigma**2))
        region = hm[rr[0] : rr[-1] + 1, cc[0] : cc[-1] + 1]
        np.maximum(region, patch, out=region)
    return hm


def box_reg_targets(gt: list[Box3D], grid: GridSpec) -> dict[tuple[int, int], np.ndarray]:
    """Regression targets keyed by center cell; later boxes win collisions."""
    out: dict[tuple[int, int], np.ndarray] = {}
    for box in gt:
        cell = grid.cell_of(box.center[None, :2])[0]
        r0, c0 = int(cell[0]), int(cell[1])
        if not (0 <= r0 < grid.h and 0 <= c0 < grid.w):
            continue
        center = grid.centers_of(np.array([[r0, c0]]))[0]
        out[(r0, c0)] = np.array(
            [
                (box.center[0] - center[0]) / grid.cell_m,
                (box.center[1] - center[1]) / grid.cell_m,
                box.center[2],
                math.log(box.size[0]),
                math.log(box.size[1]),
                math.log(box.size[2]),
                math.sin(box.heading),
                math.cos(box.heading),
            ]
        )
    return out


# ---------------------------------------------------------------------------
# losses


def focal_loss(pred: Tensor, target: np.ndarray, mode: str) -> Tensor:
    """Focal loss over probabilities.

    seg mode: binary focal loss (gamma=2, alpha=0.25), mean over pillars.
    heatmap mode: penalty-reduced center focal loss (alpha=2, beta=4),
    summed and normalized by the number of positives (at least 1).
    """
    p = clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    target = np.asarray(target, dtype=np.float64).reshape(p.shape)
    if mode == "seg":
        pos = target >= 0.5
        pos_term = scale(mul(power(sub(1.0, p), 2.0), log(p)), -0.25)
        neg_term = scale(mul(power(p, 2.0), log(sub(1.0, p))), -0.75)
        loss = where(pos, pos_term, neg_term)
        return reduce_mean(loss)
    if mode == "heatmap":
        pos = target >= 1.0 - 1e-12
        pos_term = neg(mul(power(sub(1.0, p), 2.0), log(p)))
        neg_w = np.power(1.0 - target, 4.0)
        neg_term = neg(mul(mul(power(p, 2.0), log(sub(1.0, p))), Tensor(neg_w)))
        loss = reduce_sum(where(pos, pos_term, neg_term))
        return scale(loss, 1.0 / max(int(pos.sum()), 1))
    raise ValueError(f"unknown focal mode {mode!r}")


def box_loss(box_reg: Tensor, targets: np.ndarray, positives: np.ndarray) -> Tensor:
    """Smooth-L1 over the 8 regression channels at positive rows.

    `targets` is (K, 8) aligned with box_reg; `positives` is a boolean (K,)
    mask (cells whose heatmap target is ~1). Sums channels, averages over
    positives (at least 1).
    """
    idx = np.flatnonzero(positives)
    if idx.size == 0:
        return scale(reduce_sum(mul(box_reg, Tensor(np.zeros(box_reg.shape)))), 1.0)
    pred = gather_rows(box_reg, idx)
    diff = sub(pred, Tensor(targets[idx]))
    per = reduce_sum(smooth_l1(diff, beta=1.0))
    return scale(per, 1.0 / idx.size)


def total_loss(seg: Tensor, center: Tensor, box: Tensor,
               lambda_seg: float = 200.0, lambda_center: float = 10.0) -> tuple[Tensor, LossBreakdown]:
    total = scale(seg, lambda_seg) + scale(center, lambda_center) + box
    breakdown = LossBreakdown(
        total=float(total.data), seg=float(seg.data),
        center=float(center.data), box=float(box.data),
    )
    return total, breakdown


# ---------------------------------------------------------------------------
# decoding and evaluation


def decode(head: HeadOutput, grid: GridSpec, k_max: int = 64,
           score_thresh: float = 0.1) -> list[tuple[Box3D, float]]:
    """Peak-pick 3x3 local maxima of the heatmap and decode boxes.

    Ties between equal neighbors keep the lowest row-major coordinate.
    """
    k = head.coords.shape[0]
    if k == 0:
        return []
    dense = np.zeros((grid.h, grid.w))
    dense[head.coords[:, 0], head.coords[:, 1]] = head.heatmap.data
    scores = head.heatmap.data
    keep = scores > score_thresh
    reg = head.box_reg.data
    out = []
    for i in np.flatnonzero(keep):
        r, c = head.coords[i]
        flat_i = r * grid.w + c
        is_peak = True
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == 0 and dc == 0:
                    continue
                rr, cc = r + dr, c + dc
                if not (0 <= rr < grid.h and 0 <= cc < grid.w):
                    continue
                v = dense[rr, cc]
                if v > scores[i] or (v == scores[i] and rr * grid.w + cc < flat_i):
                    is_peak = False
                    break
            if not is_peak:
                break
        if not is_peak:
            continue
        center = grid.centers_of(np.array([[r, c]]))[0]
        box = Box3D(
            center=np.array(
                [
                    center[0] + reg[i, 0] * grid.cell_m,
                    center[1] + reg[i, 1] * grid.cell_m,
                    reg[i, 2],
                ]
            ),
            size=np.exp(reg[i, 3:6]),
            heading=math.atan2(reg[i, 6], reg[i, 7]),
        )
        out.append((box, float(scores[i])))
    out.sort(key=lambda bs: (-bs[1], bs[0].center[0], bs[0].center[1]))
    return out[:k_max]


def _clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex polygon by a convex polygon (CCW)."""
    poly = list(subject)
    m = clipper.shape[0]
    for i in range(m):
        a = clipper[i]
        b = clipper[(i + 1) % m]
        edge = (b[0] - a[0], b[1] - a[1])
        new_poly = []
        for j in range(len(poly)):
            p = poly[j]
            q = poly[(j + 1) % len(poly)]
            p_in = edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0]) >= 0
            q_in = edge[0] * (q[1] - a[1]) - edge[1] * (q[0] - a[0]) >= 0
            if p_in:
                new_poly.append(p)
            if p_in != q_in:
                denom = edge[0] * (q[1] - p[1]) - edge[1] * (q[0] - p[0])
                if denom != 0:
                    t = (edge[0] * (a[1] - p[1]) - edge[1] * (a[0] - p[0])) / denom
                    new_poly.append(p + t * (q - p))
        poly = new_poly
        if not poly:
            break
    return np.array(poly) if poly else np.zeros((0, 2))


def _polygon_area(poly: np.ndarray) -> float:
    if poly.shape[0] < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def bev_iou(a: Box3D, b: Box3D) -> float:
    ca = a.bev_corners()
    cb = b.bev_corners()
    inter = _polygon_area(_clip_polygon(ca, cb))
    area_a = a.size[0] * a.size[1]
    area_b = b.size[0] * b.size[1]
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def iou_3d(a: Box3D, b: Box3D) -> float:
    ca = a.bev_corners()
    cb = b.bev_corners()
    inter_bev = _polygon_area(_clip_polygon(ca, cb))
    za0, za1 = a.center[2] - a.size[2] / 2, a.center[2] + a.size[2] / 2
    zb0, zb1 = b.center[2] - b.size[2] / 2, b.center[2] + b.size[2] / 2
    dz = max(0.0, min(za1, zb1) - max(za0, zb0))
    inter = inter_bev * dz
    vol_a = a.size.prod()
    vol_b = b.size.prod()
    union = vol_a + vol_b - inter
    return inter / union if union > 0 else 0.0


def evaluate_ap(
    preds: list[list[tuple[Box3D, float]]],
    gts: list[list[Box3D]],
    iou_thresh: float = 0.5,
    mode: str = "bev",
    heading_weighted: bool = False,
) -> float:
    """101-point interpolated AP with greedy highest-IoU matching.

    `preds` and `gts` are parallel per-frame lists. With heading_weighted
    (a non-official heading-quality mode), each true positive contributes
    (1 + cos dtheta) / 2 instead of 1.
    """
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth frame counts differ")
    iou_fn = bev_iou if mode == "bev" else iou_3d
    n_gt = sum(len(g) for g in gts)
    ranked = []
    for fi, frame_preds in enumerate(preds):
        for box, score in frame_preds:
            ranked.append((score, fi, box))
    ranked.sort(key=lambda t: -t[0])
    matched: list[set[int]] = [set() for _ in gts]
    tp_weights = []
    for score, fi, box in ranked:
        best_iou, best_j = 0.0, -1
        for j, gt_box in enumerate(gts[fi]):
            if j in matched[fi]:
                continue
            v = iou_fn(box, gt_box)
            if v >= iou_thresh and v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0:
            matched[fi].add(best_j)
            if heading_weighted:
                dtheta = box.heading - gts[fi][best_j].heading
                tp_weights.append((1.0 + math.cos(dtheta)) / 2.0)
            else:
                tp_weights.append(1.0)
        else:
            tp_weights.append(0.0)
    if n_gt == 0 or not tp_weights:
        return 0.0
    tp_cum = np.cumsum(tp_weights)
    hits_cum = np.cumsum([1.0 if w > 0 else 0.0 for w in tp_weights])
    ranks = np.arange(1, len(tp_weights) + 1)
    precision = tp_cum / ranks
    recall = hits_cum / n_gt
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return float(ap / 101.0)


def export_predictions_csv(path, frames: list[list[tuple[Box3D, float]]]) -> None:
    """One row per box: frame_id, score, cx, cy, cz, l, w, h, heading."""
    with open(path, "w") as f:
        f.write("frame_id,score,cx,cy,cz,l,w,h,heading\n")
        for fi, boxes in enumerate(frames):
            for box, score in boxes:
                c, s = box.center, box.size
                f.write(
                    f"{fi},{score:.9g},{c[0]:.9g},{c[1]:.9g},{c[2]:.9g},"
                    f"{s[0]:.9g},{s[1]:.9g},{s[2]:.9g},{box.heading:.9g}\n"
                )
