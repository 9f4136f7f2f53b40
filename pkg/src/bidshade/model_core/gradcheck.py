from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from ..errors import UsageError
from .autodiff import Tape


def grad_check(build_loss: Callable, tensors: dict, h: float = 1e-4, max_entries: Optional[int] = None,
               seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``build_loss(tape)`` returns a scalar node; it must register every array
    in ``tensors`` as a named variable (``tape.var(arr, name)``), which
    DeepFM.forward does for its parameters. ``tensors`` maps those names to
    the live float64 arrays, which are perturbed in place by
    ``h * max(1, |value|)`` and restored. Gradients smaller than 1e-7 of the
    largest one are compared on that absolute scale.
    """
    tape = Tape()
    loss = build_loss(tape)
    tape.backward(loss)
    ana = tape.grads()
    missing = set(tensors) - set(ana)
    if missing:
        raise UsageError(f"build_loss did not register variables {sorted(missing)}")
    for k, arr in tensors.items():
        if arr.dtype != np.float64:
            raise UsageError(f"grad_check needs float64 tensors, '{k}' is {arr.dtype}")
    scale = max(float(np.max(np.abs(ana[k]))) for k in tensors) or 1.0

    def value():
        return float(build_loss(Tape()).value)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, arr in tensors.items():
        flat = arr.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = rng.choice(flat.size, max_entries, replace=False)
        g_ana = ana[k].reshape(-1)
        for i in entries:
            orig = flat[i]
            step = h * max(1.0, abs(orig))
            flat[i] = orig + step
            up = value()
            flat[i] = orig - step
            down = value()
            flat[i] = orig
            num = (up - down) / (2 * step)
            denom = max(abs(num), abs(g_ana[i]), 1e-7 * scale)
            worst = max(worst, abs(num - g_ana[i]) / denom)
    return worst
