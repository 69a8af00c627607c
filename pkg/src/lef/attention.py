"""Window-based attention over sparse pillar tokens.

Tokens are grouped into fixed ws x ws BEV tiles (window id = coord // ws)
and attend only within their window. Blocks are pre-norm: the attention
branch reads LN(x) plus a sinusoidal encoding of the in-window coordinate,
and a 2x-expansion feedforward follows. Key/value tokens may come from the
query set itself (self), from the calibrated history tokens (cross), or
from their union (mix); in all cases keys are windowed under the query's
partition. Query windows with zero valid keys pass through on the residual
path, untouched by attention.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from lef.numerics import (
    NEG_INF,
    Tensor,
    add,
    concat,
    gather_rows,
    gelu,
    matmul,
    mul,
    reshape,
    scale,
    scatter_rows,
    softmax,
    transpose,
)
from lef.numerics.nn import LayerNorm, Linear, Module
from lef.pillars import SparsePillarSet


class AttentionVariant(enum.Enum):
    SELF = "self"
    CROSS = "cross"
    MIX = "mix"


@dataclass
class WindowBatch:
    """Token-to-window assignment with padding bookkeeping.

    Slot layout is canonical: windows sorted by id, tokens within a window
    sorted row-major by coordinate. `slot` maps each input token (original
    order) to its flat position in the (n_windows * t_max) padded layout.
    """

    window_ids: np.ndarray  # (nw, 2) int64, sorted
    slot: np.ndarray  # (N,) int64
    pad_mask: np.ndarray  # (nw, t_max) bool, True at real tokens
    ws: int

    @property
    def n_windows(self) -> int:
        return self.window_ids.shape[0]

    @property
    def t_max(self) -> int:
        return self.pad_mask.shape[1] if self.pad_mask.size else 0


def window_partition(coords: np.ndarray, ws: int) -> WindowBatch:
    """Partition tokens into ws x ws windows; every token lands in exactly one."""
    if ws < 1:
        raise ValueError("window size must be >= 1")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    n = coords.shape[0]
    if n == 0:
        return WindowBatch(
            np.zeros((0, 2), np.int64), np.zeros(0, np.int64),
            np.zeros((0, 0), bool), ws,
        )
    win = coords // ws
    order = np.lexsort((coords[:, 1], coords[:, 0], win[:, 1], win[:, 0]))
    wsorted = win[order]
    boundary = np.ones(n, dtype=bool)
    boundary[1:] = (wsorted[1:] != wsorted[:-1]).any(axis=1)
    window_ids = wsorted[boundary]
    win_index = np.cumsum(boundary) - 1
    starts = np.flatnonzero(boundary)
    pos = np.arange(n) - starts[win_index]
    t_max = int(pos.max()) + 1
    slot_sorted = win_index * t_max + pos
    slot = np.empty(n, dtype=np.int64)
    slot[order] = slot_sorted
    pad_mask = np.zeros((window_ids.shape[0], t_max), dtype=bool)
    pad_mask.reshape(-1)[slot_sorted] = True
    return WindowBatch(window_ids, slot, pad_mask, ws)


def align_to_windows(coords: np.ndarray, batch_ids: np.ndarray, ws: int):
    """Assign foreign tokens to an existing sorted window-id list.

    Returns (kept, win_index): indices of tokens whose window exists in
    `batch_ids`, and the window index of each kept token.
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if coords.shape[0] == 0 or batch_ids.shape[0] == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    win = coords // ws
    keys = batch_ids[:, 0] << 32 | batch_ids[:, 1]
    tok = win[:, 0] << 32 | win[:, 1]
    pos = np.searchsorted(keys, tok)
    pos_c = np.clip(pos, 0, keys.size - 1)
    hit = keys[pos_c] == tok
    return np.flatnonzero(hit), pos_c[hit]


def positional_encoding(coord_in_window: tuple[int, int], d: int) -> np.ndarray:
    """Sinusoidal absolute encoding of an in-window (row, col) coordinate.

    Groups of four channels hold (sin r, cos r, sin c, cos c) at frequency
    1 / 10000^(4k/d) for k = 0 .. d/4 - 1, so d must be divisible by 4.
    """
    if d % 4 != 0:
        raise ValueError(f"encoding width must be divisible by 4, got {d}")
    r, c = coord_in_window
    out = np.empty(d)
    for k in range(d // 4):
        omega = 10000.0 ** (4.0 * k / d)
        out[4 * k + 0] = math.sin(r / omega)
        out[4 * k + 1] = math.cos(r / omega)
        out[4 * k + 2] = math.sin(c / omega)
        out[4 * k + 3] = math.cos(c / omega)
    return out


def positional_encoding_table(coords: np.ndarray, ws: int, d: int) -> np.ndarray:
    """Vectorized in-window encodings for (N, 2) absolute coordinates."""
    if d % 4 != 0:
        raise ValueError(f"encoding width must be divisible by 4, got {d}")
    local = np.asarray(coords, dtype=np.float64) % ws
    k = np.arange(d // 4)
    omega = 10000.0 ** (4.0 * k / d)
    out = np.empty((local.shape[0], d))
    out[:, 0::4] = np.sin(local[:, 0:1] / omega)
    out[:, 1::4] = np.cos(local[:, 0:1] / omega)
    out[:, 2::4] = np.sin(local[:, 1:2] / omega)
    out[:, 3::4] = np.cos(local[:, 1:2] / omega)
    return out


class AttentionBlock(Module):
    """Pre-norm windowed multi-head attention + feedforward."""

    def __init__(self, d: int, heads: int, ws: int, rng: np.random.Generator):
        if d % heads != 0:
            raise ValueError(f"head count {heads} does not divide width {d}")
        self.d = d
        self.heads = heads
        self.ws = ws
        self.norm_attn = LayerNorm(d)
        self.norm_ffn = LayerNorm(d)
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)
        self.ffn1 = Linear(d, 2 * d, rng)
        self.ffn2 = Linear(2 * d, d, rng)

    def __call__(
        self,
        tokens: SparsePillarSet,
        variant: AttentionVariant = AttentionVariant.SELF,
        history: SparsePillarSet | None = None,
    ) -> SparsePillarSet:
        n = len(tokens)
        if n == 0:
            return tokens
        d, h = self.d, self.heads
        dh = d // h
        qb = window_partition(tokens.coords, self.ws)
        nw, tq = qb.n_windows, qb.t_max

        x = tokens.features
        pre = self.norm_attn(x)
        pe_q = positional_encoding_table(tokens.coords, self.ws, d)
        attn_in = add(pre, Tensor(pe_q))

        # key/value source per variant, windowed under the query partition
        if variant is AttentionVariant.SELF:
            kv_in, kv_slot, kv_pad = attn_in, qb.slot, qb.pad_mask
        else:
            hist = history if history is not None else SparsePillarSet.empty(d)
            if variant is AttentionVariant.CROSS:
                kv_coords, kv_feats = hist.coords, hist.features
            else:  # MIX: union at token level; shared coords yield two keys
                kv_coords = np.concatenate([tokens.coords, hist.coords], axis=0)
                kv_feats = concat([tokens.features, hist.features], axis=0)
            kept, win_index = align_to_windows(kv_coords, qb.window_ids, self.ws)
            # group kept tokens by window (stable, so source order survives)
            grouping = np.lexsort((np.arange(kept.size), win_index))
            kept, win_index = kept[grouping], win_index[grouping]
            kv_coords = kv_coords[kept]
            kv_pre = self.norm_attn(gather_rows(kv_feats, kept))
            pe_kv = positional_encoding_table(kv_coords, self.ws, d)
            kv_in = add(kv_pre, Tensor(pe_kv))
            tk = 1
            if kept.size:
                counts = np.bincount(win_index, minlength=nw)
                tk = max(int(counts.max()), 1)
                group_start = np.concatenate(([0], np.cumsum(counts)))[win_index]
                pos = np.arange(kept.size) - group_start
                kv_slot = win_index * tk + pos
            else:
                kv_slot = np.zeros(0, np.int64)
            kv_pad = np.zeros((nw, tk), dtype=bool)
            kv_pad.reshape(-1)[kv_slot] = True

        tk = kv_pad.shape[1]
        q = reshape(scatter_rows(self.wq(attn_in), qb.slot, nw * tq), (nw, tq, h, dh))
        k = reshape(scatter_rows(self.wk(kv_in), kv_slot, nw * tk), (nw, tk, h, dh))
        v = reshape(scatter_rows(self.wv(kv_in), kv_slot, nw * tk), (nw, tk, h, dh))
        q = transpose(q, (0, 2, 1, 3))
        k = transpose(k, (0, 2, 3, 1))
        v = transpose(v, (0, 2, 1, 3))
        logits = scale(matmul(q, k), 1.0 / math.sqrt(dh))
        bias = np.where(kv_pad, 0.0, NEG_INF)[:, None, None, :]
        logits = add(logits, Tensor(np.broadcast_to(bias, (nw, h, tq, tk)).copy()))
        weights = softmax(logits, axis=-1)
        ctx = matmul(weights, v)  # (nw, h, tq, dh)
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (nw * tq, d))
        ctx = gather_rows(ctx, qb.slot)
        # windows with zero valid keys contribute nothing through attention
        live = kv_pad.any(axis=1).astype(np.float64)
        token_live = live[qb.slot // tq] if tq else live[:0]
        if not token_live.all():
            ctx = mul(ctx, Tensor(np.repeat(token_live[:, None], d, axis=1)))
        x = add(x, self.wo(ctx))

        y = self.ffn2(gelu(self.ffn1(self.norm_ffn(x))))
        x = add(x, y)
        return SparsePillarSet(tokens.coords, x)
