from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .params import ParamStore


def clip_global_norm(grads, max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the scale factor that was applied (1.0 when no clipping happened).
    """
    total = math.fsum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)
    norm = math.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    for g in grads:
        g *= g.dtype.type(scale)
    return scale


@dataclass
class OptimizerState:
    lr: float = 5e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(store: ParamStore, state: OptimizerState) -> None:
    """Decoupled weight decay followed by a bias-corrected Adam update.

    Gradients are cleared afterwards.
    """
    state.t += 1
    t = state.t
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in store.trainable_items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data *= p.dtype.type(1.0 - state.lr * state.weight_decay)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
        p.zero_grad()
