from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import TrainingError


@dataclass
class AdamState:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> AdamState:
    """In-place Adam update (with bias correction) of every array in
    ``params`` that has a gradient. Frozen tensors are simply not passed in."""
    for k, g in grads.items():
        if k not in params:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for '{k}' at step {state.t + 1}")
        if np.shape(g) != np.shape(params[k]):
            raise TrainingError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(params[k])} for '{k}'")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for k, g in grads.items():
        if k not in params:
            continue
        p = params[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p, dtype=np.float64)
            state.v[k] = np.zeros_like(p, dtype=np.float64)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
        if not np.all(np.isfinite(p)):
            raise TrainingError(f"parameter '{k}' became non-finite at step {state.t}")
    return state
