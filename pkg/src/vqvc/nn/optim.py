from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .functional import ConfigError
from .tensor import ACCUM_DTYPE, Parameter


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: list[Parameter], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place.

    Parameters without a gradient count as zero-gradient. Moments are kept in
    the parameter dtype; the update itself is computed in float64.
    """
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p in params:
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        g64 = g.astype(ACCUM_DTYPE)
        m = b1 * state.m[p.name].astype(ACCUM_DTYPE) + (1.0 - b1) * g64
        v = b2 * state.v[p.name].astype(ACCUM_DTYPE) + (1.0 - b2) * g64 * g64
        state.m[p.name] = m.astype(p.data.dtype)
        state.v[p.name] = v.astype(p.data.dtype)
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data.astype(ACCUM_DTYPE) - step).astype(p.data.dtype)


def global_grad_norm(params) -> float:
    return float(np.sqrt(sum(float(np.sum(p.grad.astype(ACCUM_DTYPE) ** 2))
                             for p in params if p.grad is not None)))


def clip_grad_norm(params, max_norm: float) -> float:
    norm = global_grad_norm(params)
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return norm
