"""Adam with bias correction and the inverse-square-root warmup schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .params import ParamStore


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def noam_lr(step: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    if step < 1:
        raise ValueError("step must be >= 1")
    if warmup < 1:
        raise ValueError("warmup must be >= 1")
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for name in grads:
            grads[name] = grads[name] * grads[name].dtype.type(scale)
    return total


def adam_step(params: ParamStore, grads: dict, state: AdamState, lr: float,
              clip_norm: float | None = None) -> AdamState:
    """One in-place Adam update of every non-frozen parameter that has a gradient."""
    if not lr > 0:
        raise ValueError("lr must be positive")
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
    if clip_norm is not None:
        grads = dict(grads)
        clip_by_global_norm(grads, clip_norm)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        if name in params.frozen:
            continue
        p = params[name]
        dt = p.data.dtype.type
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * (g * g)
        update = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.eps))
        p.data = p.data - dt(lr) * update
    return state
