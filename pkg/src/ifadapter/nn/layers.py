"""Parameterized building blocks over ``ParamStore``."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .params import ParamStore

ACTIVATIONS = {
    "gelu": ag.gelu,
    "relu": ag.relu,
    "tanh": ag.tanh,
    "linear": lambda x: x,
}


def fourier_embed(v, bands: int) -> np.ndarray:
    """``[sin(2*pi*2^j*v) for j<bands] + [cos(2*pi*2^j*v) for j<bands]``.

    ``v`` may be a scalar or an array; the embedding is appended on a new
    trailing axis.
    """
    if bands < 1:
        raise ValueError("bands must be >= 1")
    v = np.asarray(v, dtype=np.float64)
    freqs = 2.0 * np.pi * (2.0 ** np.arange(bands))
    ang = v[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def timestep_embed(t, dim: int, max_period: float = 1000.0) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    ang = t[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, bias: bool = True, scale: float = 1.0,
                 frozen: bool = False):
        w = rng.standard_normal((d_in, d_out)) * (scale / np.sqrt(d_in))
        self.w = store.add(f"{name}.w", w, frozen=frozen)
        self.b = store.add(f"{name}.b", np.zeros(d_out), frozen=frozen) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ag.DimensionError(f"Linear expects {self.d_in} features, got {x.shape[-1]}")
        y = x @ self.w
        return y + self.b if self.b is not None else y


class MLP:
    """Affine layers with an activation between consecutive pairs."""

    def __init__(self, store: ParamStore, name: str, dims: Sequence[int],
                 rng: np.random.Generator, activation: str = "gelu",
                 final_scale: float = 1.0, frozen: bool = False):
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output dims")
        self.layers = [
            Linear(store, f"{name}.{i}", dims[i], dims[i + 1], rng,
                   scale=final_scale if i == len(dims) - 2 else 1.0, frozen=frozen)
            for i in range(len(dims) - 1)
        ]
        self.act = ACTIVATIONS[activation]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.act(x)
        return x


def mlp_forward(x, store: ParamStore, name: str, n_layers: int, activation: str = "gelu") -> Tensor:
    """Run the MLP stored under ``name.{i}.w / name.{i}.b`` for ``i < n_layers``."""
    x = ag.as_tensor(x)
    act = ACTIVATIONS[activation]
    for i in range(n_layers):
        w, b = store[f"{name}.{i}.w"], store[f"{name}.{i}.b"]
        if x.shape[-1] != w.shape[0]:
            raise ag.DimensionError(f"{name}.{i}: {x.shape[-1]} features into {w.shape}")
        x = x @ w + b
        if i < n_layers - 1:
            x = act(x)
    return x


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int, frozen: bool = False):
        self.g = store.add(f"{name}.g", np.ones(dim), frozen=frozen)
        self.b = store.add(f"{name}.b", np.zeros(dim), frozen=frozen)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.g, self.b)


class Conv2d:
    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, k: int,
                 rng: np.random.Generator, scale: float = 1.0, frozen: bool = False):
        w = rng.standard_normal((k, k, c_in, c_out)) * (scale / np.sqrt(k * k * c_in))
        self.w = store.add(f"{name}.w", w, frozen=frozen)
        self.b = store.add(f"{name}.b", np.zeros(c_out), frozen=frozen)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.conv2d(x, self.w, self.b)
