"""Minimal parameter containers on top of the tensor primitives."""

from __future__ import annotations

import math

import numpy as np

from lef.numerics import tensor as T
from lef.numerics.tensor import Tensor


class Module:
    """Base class; collects parameters by walking attributes."""

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, val in vars(self).items():
            key = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[key] = val
            elif isinstance(val, Module):
                out.update(val.parameters(key))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.parameters(f"{key}.{i}"))
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def load_state(self, state: dict[str, np.ndarray]):
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data = arr


class Linear(Module):
    """y = x @ W + b with Kaiming-uniform init."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        bound = math.sqrt(1.0 / d_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(d_in, d_out)), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, size=(d_out,)), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = _add_row_vector(y, self.bias)
        return y


def _add_row_vector(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-d vector to every row of a (..., d) tensor."""
    if b.shape != (x.shape[-1],):
        raise T.ShapeError(f"bias shape {b.shape} does not match {x.shape}")

    def bwd(g):
        if x.requires_grad:
            T._accumulate(x, g)
        if b.requires_grad:
            T._accumulate(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return T._make(x.data + b.data, (x, b), bwd)


class LayerNorm(Module):
    """Layer norm over the last axis with learnable gain and bias."""

    def __init__(self, d: int):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        normed = T.layer_norm(x)
        scaled = _mul_row_vector(normed, self.gain)
        return _add_row_vector(scaled, self.bias)


def _mul_row_vector(x: Tensor, w: Tensor) -> Tensor:
    def bwd(g):
        if x.requires_grad:
            T._accumulate(x, g * w.data)
        if w.requires_grad:
            T._accumulate(w, (g * x.data).reshape(-1, g.shape[-1]).sum(axis=0))

    return T._make(x.data * w.data, (x, w), bwd)


class Mlp(Module):
    """linear -> activation -> linear."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng, activation: str = "relu"):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)
        self._act = activation

    def __call__(self, x: Tensor) -> Tensor:
        h = self.fc1(x)
        h = T.relu(h) if self._act == "relu" else T.gelu(h)
        return self.fc2(h)
