from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["AdamState", "adam_step", "TrainingDivergenceError"]


class TrainingDivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True, eq=False)
class AdamState:
    """First/second moment estimates for a list of parameter arrays."""

    m: tuple
    v: tuple
    t: int = 0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params, lr: float = 5e-4, **kw) -> "AdamState":
        zeros = tuple(np.zeros_like(p) for p in params)
        return cls(zeros, tuple(np.zeros_like(p) for p in params), 0, lr, **kw)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update.

    Returns ``(new_params, new_state)``; inputs are not modified. Raises
    :class:`TrainingDivergenceError` if any gradient is NaN or infinite.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient at Adam step {state.t + 1}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(tuple(new_m), tuple(new_v), t, state.lr, b1, b2, state.eps)
