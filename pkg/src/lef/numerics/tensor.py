"""Dense tensors with reverse-mode differentiation.

Everything trainable in this package is built from the primitives here and
is gradient-checked against central finite differences. Tensors are
functional: ops return new tensors and never mutate inputs, so values can
be shared freely. One backward graph is single-threaded; independent
graphs may live on independent threads.

Design constraints:
  - double precision by default (finite-difference checks need it);
    float32 is allowed for benchmark runs via set_default_dtype.
  - no broadcasting beyond leading-batch dims: elementwise ops require
    identical shapes (scalars excepted), matmul allows a 2-d right-hand
    operand against a batched left-hand one.
  - with debug mode on, every op output is checked for NaN/Inf.
"""

from __future__ import annotations

import math

import numpy as np

_DEFAULT_DTYPE = np.float64
_DEBUG_FINITE = False
_GRAD_ENABLED = True

LAYER_NORM_EPS = 1e-5
# Additive mask value for attention padding. exp(x - max) underflows to an
# exact 0.0 for x this far below any real logit, giving exact padding
# invariance while keeping every stored value finite for debug checks.
NEG_INF = -1e30


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError("default dtype must be float32 or float64")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


def set_debug(flag: bool) -> None:
    """Toggle per-op finiteness checks (slow; meant for tests)."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(flag)


class no_grad:
    """Context manager disabling graph recording (pure inference)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # small operator surface; the module-level functions are the real API
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def _make(data: np.ndarray, parents, backward_fn) -> Tensor:
    if _DEBUG_FINITE and not np.isfinite(data).all():
        raise FloatingPointError("op produced non-finite values (debug mode)")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._done = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


class Tape:
    """Reverse-topological schedule over the graph reachable from a root.

    Nodes are collected once (iterative DFS, so deep recurrences don't hit
    the recursion limit) and visited exactly once in reverse order during
    the backward sweep.
    """

    def __init__(self, root: Tensor):
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.order = order

    def run(self, root: Tensor):
        root.grad = np.ones_like(root.data)
        for node in reversed(self.order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior grads are transient; free them as we go
                if node is not root:
                    node.grad = None


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every requires_grad leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("backward called on a non-finite loss")
    if loss._done:
        raise RuntimeError("backward already ran for this graph; rebuild it or reset")
    if not loss.requires_grad:
        raise RuntimeError("loss does not require grad; nothing to differentiate")
    Tape(loss).run(loss)
    loss._done = True


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _binary_shapes(a: Tensor, b: Tensor, name: str):
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"{name}: shape mismatch {a.data.shape} vs {b.data.shape}")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    # only scalar operands can mismatch, per _binary_shapes
    return np.sum(g).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _reduce_to(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to(g, b.data.shape))

    return _make(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _reduce_to(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _reduce_to(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), bwd)


def scale(a, k: float) -> Tensor:
    """Multiply by a python constant (no graph node for the constant)."""
    a = as_tensor(a)
    k = float(k)

    def bwd(g):
        _accumulate(a, g * k)

    return _make(a.data * k, (a,), bwd)


# ---------------------------------------------------------------------------
# matmul / shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(
            f"matmul: leading batch dims must match exactly, {a.shape} @ {b.shape}"
        )

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            if b.ndim == 2 and gb.ndim > 2:
                gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
            _accumulate(b, gb)

    return _make(a.data @ b.data, (a, b), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)

    def bwd(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = np.argsort(axes)

    def bwd(g):
        _accumulate(a, np.transpose(g, inv))

    return _make(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, s, e in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(s, e)
                _accumulate(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select rows along axis 0. Gradient scatter-adds back."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise ShapeError("gather_rows index must be 1-d")
    if index.size and (index.min() < 0 or index.max() >= a.data.shape[0]):
        raise ShapeError(
            f"gather_rows index out of range [0, {a.data.shape[0]}) "
            f"(min {index.min()}, max {index.max()})"
        )

    def bwd(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, index, g)
        _accumulate(a, buf)

    return _make(a.data[index], (a,), bwd)


def scatter_rows(src: Tensor, index: np.ndarray, num_rows: int) -> Tensor:
    """Place rows of src at unique positions of a zero-filled output."""
    src = as_tensor(src)
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1 or index.shape[0] != src.data.shape[0]:
        raise ShapeError(
            f"scatter_rows: index length {index.shape} vs rows {src.data.shape[0]}"
        )
    if index.size:
        if index.min() < 0 or index.max() >= num_rows:
            raise ShapeError(f"scatter_rows index out of range [0, {num_rows})")
        if np.unique(index).size != index.size:
            raise ShapeError("scatter_rows requires unique indices")

    def bwd(g):
        _accumulate(src, g[index])

    out = np.zeros((num_rows,) + src.data.shape[1:], dtype=src.data.dtype)
    out[index] = src.data
    return _make(out, (src,), bwd)


def segment_max(data: Tensor, starts: np.ndarray, ends: np.ndarray) -> Tensor:
    """Per-segment column-wise max over contiguous row ranges.

    Segments must be non-empty. Ties resolve to the earliest row, and the
    gradient flows only to that row (matching the forward kernel exactly).
    """
    from lef import kernels

    data = as_tensor(data)
    if data.ndim != 2:
        raise ShapeError(f"segment_max expects 2-d data, got {data.shape}")
    starts = np.asarray(starts, dtype=np.int64)
    ends = np.asarray(ends, dtype=np.int64)
    values, argrows = kernels.segment_max(data.data, starts, ends)

    def bwd(g):
        buf = np.zeros_like(data.data)
        cols = np.arange(data.data.shape[1])
        np.add.at(buf, (argrows, cols[None, :].repeat(argrows.shape[0], axis=0)), g)
        _accumulate(data, buf)

    return _make(values, (data,), bwd)


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            _accumulate(a, np.repeat(np.expand_dims(g, axis), a.data.shape[axis], axis))

    out = a.data.sum(axis=axis)
    return _make(np.asarray(out), (a,), bwd)


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g / n, a.data.shape).copy())
        else:
            _accumulate(
                a, np.repeat(np.expand_dims(g / n, axis), a.data.shape[axis], axis)
            )

    return _make(np.asarray(a.data.mean(axis=axis)), (a,), bwd)


def reduce_max(a: Tensor, axis: int) -> Tensor:
    a = as_tensor(a)
    out = a.data.max(axis=axis)
    arg = a.data.argmax(axis=axis)

    def bwd(g):
        buf = np.zeros_like(a.data)
        np.put_along_axis(
            buf, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis
        )
        _accumulate(a, buf)

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        _accumulate(a, g * (a.data > 0))

    return _make(np.maximum(a.data, 0), (a,), bwd)


def gelu(a) -> Tensor:
    """tanh-approximation GELU."""
    a = as_tensor(a)
    c = math.sqrt(2.0 / math.pi)
    inner = c * (a.data + 0.044715 * a.data**3)
    t = np.tanh(inner)
    out = 0.5 * a.data * (1.0 + t)

    def bwd(g):
        dinner = c * (1.0 + 3 * 0.044715 * a.data**2)
        da = 0.5 * (1.0 + t) + 0.5 * a.data * (1.0 - t**2) * dinner
        _accumulate(a, g * da)

    return _make(out, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        _accumulate(a, g * out * (1.0 - out))

    return _make(out, (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        _accumulate(a, g * out)

    return _make(out, (a,), bwd)


def sin(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        _accumulate(a, g * np.cos(a.data))

    return _make(np.sin(a.data), (a,), bwd)


def cos(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        _accumulate(a, -g * np.sin(a.data))

    return _make(np.cos(a.data), (a,), bwd)


def power(a, p: float) -> Tensor:
    """Elementwise a**p for a constant exponent."""
    a = as_tensor(a)
    p = float(p)

    def bwd(g):
        _accumulate(a, g * p * a.data ** (p - 1.0))

    return _make(a.data**p, (a,), bwd)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside [lo, hi]."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def bwd(g):
        _accumulate(a, g * ((a.data >= lo) & (a.data <= hi)))

    return _make(out, (a,), bwd)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select by a constant boolean mask; gradient routes per element."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    _binary_shapes(a, b, "where")

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _reduce_to(g * cond, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to(g * ~cond, b.data.shape))

    return _make(np.where(cond, a.data, b.data), (a, b), bwd)


def smooth_l1(a, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1 (Huber): 0.5 x^2 / beta inside, |x| - beta/2 outside."""
    a = as_tensor(a)
    absd = np.abs(a.data)
    out = np.where(absd < beta, 0.5 * a.data**2 / beta, absd - 0.5 * beta)

    def bwd(g):
        _accumulate(a, g * np.clip(a.data / beta, -1.0, 1.0))

    return _make(out, (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(a, out * (g - dot))

    return _make(out, (a,), bwd)


def layer_norm(a, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis (pre-affine). Constant rows map to zeros."""
    a = as_tensor(a)
    mean = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mean
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = centered * inv

    def bwd(g):
        n = a.data.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * out).mean(axis=-1, keepdims=True)
        _accumulate(a, inv * (g - gm - out * gx))

    return _make(out, (a,), bwd)


def stop_gradient(a) -> Tensor:
    """Identical forward value; exactly zero gradient through this edge."""
    a = as_tensor(a)
    return Tensor(a.data, requires_grad=False, dtype=a.data.dtype)
