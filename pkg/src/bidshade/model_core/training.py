from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .autodiff import Tape
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-2
    batch_size: int = 4096
    epochs: int = 20
    patience: int = 5
    val_fraction: float = 0.1
    seed: int = 0


@dataclass
class TrainHistory:
    initial_val: float = float("nan")
    val: list = field(default_factory=list)
    train: list = field(default_factory=list)
    best_epoch: int = -1
    steps: int = 0


def fit(
    params: dict,
    batch_loss: Callable,
    n: int,
    cfg: TrainConfig,
    val_metric: Optional[Callable] = None,
) -> TrainHistory:
    """Minibatch Adam over row indices ``0..n-1``.

    ``batch_loss(tape, idx)`` must build a scalar loss on ``tape`` using the
    tensors in ``params`` as named variables. A seeded ``val_fraction`` of the
    rows is held out; training stops after ``patience`` epochs without a new
    best ``val_metric`` (default: the loss itself) and the best parameters
    are restored in place.
    """
    rng = np.random.default_rng([cfg.seed, 2])
    perm = rng.permutation(n)
    n_val = int(round(n * cfg.val_fraction)) if n >= 50 else 0
    val_idx, train_idx = np.sort(perm[:n_val]), perm[n_val:]
    if n_val == 0:
        val_idx = np.arange(n)
    if val_metric is None:
        def val_metric(idx):
            return float(batch_loss(Tape(), idx).value)

    state = AdamState(lr=cfg.lr)
    hist = TrainHistory(initial_val=val_metric(val_idx))
    best = hist.initial_val
    best_params = {k: v.copy() for k, v in params.items()}
    stale = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(train_idx)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            tape = Tape()
            loss = batch_loss(tape, idx)
            tape.backward(loss)
            adam_step(params, {k: g for k, g in tape.grads().items() if k in params}, state)
            losses.append(float(loss.value))
            hist.steps += 1
        hist.train.append(float(np.mean(losses)) if losses else float("nan"))
        v = val_metric(val_idx)
        hist.val.append(v)
        log.debug("epoch %d train %.6g val %.6g", epoch, hist.train[-1], v)
        if v < best:
            best, stale, hist.best_epoch = v, 0, epoch
            best_params = {k: p.copy() for k, p in params.items()}
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    for k, p in params.items():
        p[...] = best_params[k]
    return hist
