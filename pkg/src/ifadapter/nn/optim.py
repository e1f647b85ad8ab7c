from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamStore


@dataclass
class AdamWState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(store: ParamStore, state: AdamWState) -> None:
    """One decoupled-weight-decay Adam update over the unfrozen parameters.

    Gradients are consumed and cleared. An unfrozen parameter without a
    gradient slot is a usage error (call ``store.zero_grad()`` before the
    forward pass).
    """
    names = store.trainable()
    missing = [n for n in names if store[n].grad is None]
    if missing:
        raise RuntimeError(f"no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for n in names:
        p = store[n]
        g = p.grad
        m = state.m.get(n)
        if m is None:
            m = state.m[n] = np.zeros_like(p.data)
            state.v[n] = np.zeros_like(p.data)
        v = state.v[n]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        data = p.data * (1.0 - state.lr * state.weight_decay)
        data = data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = data
        p.grad = None
