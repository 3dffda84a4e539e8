"""Adaptive-moment (Adam) update as a pure function of (state, params, grads)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericDomainError, ParameterError


@dataclass(frozen=True)
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_init(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    if not lr > 0:
        raise ParameterError(f"learning rate must be positive, got {lr}")
    return AdamState(
        lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def optimizer_step(state, params, grads):
    """Return ``(new_params, new_state)``; inputs are never mutated.

    Raises NumericDomainError before touching anything if a gradient is non-finite.
    """
    if not state.lr > 0:
        raise ParameterError(f"learning rate must be positive, got {state.lr}")
    for name, p in params.items():
        if name not in grads:
            raise ParameterError(f"missing gradient for {name!r}")
        g = grads[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ParameterError(f"shape mismatch for {name!r}: param {p.shape}, grad {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericDomainError(f"non-finite gradient for {name!r}; step refused")

    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** step
    corr2 = 1.0 - b2 ** step
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = m / corr1
        v_hat = v / corr2
        new_params[name] = (p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
        new_m[name] = m.astype(p.dtype, copy=False)
        new_v[name] = v.astype(p.dtype, copy=False)
    new_state = AdamState(state.lr, b1, b2, state.eps, step, new_m, new_v)
    return new_params, new_state
