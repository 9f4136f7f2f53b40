"""Multi-slot GSP auction resolution.

Scalar functions (`run_auction`, `min_winning_price`) are the readable
reference; `resolve_auctions` is the vectorized path used by the simulator
and the replay harness. Both follow the same rules:

* the focal bidder ranks ahead of any competitor with an equal bid;
* it wins slot ``1 + #(competitors > bid)`` when that rank is <= K;
* it pays the highest competing bid strictly below its own bid (or its
  own bid when every remaining competitor ties it);
* the minimum winning price is the K-th highest competing bid.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..errors import ConfigError

MILLI = 1000.0


def to_milli(x):
    """Round currency amounts to the fixed-point milli-unit grid."""
    return np.round(np.asarray(x, dtype=np.float64) * MILLI) / MILLI


@dataclass(frozen=True)
class SlotProfile:
    """Slot layout of one scene: K slots with non-increasing CTR factors."""

    scene_id: int
    u: tuple

    def __post_init__(self):
        u = tuple(float(v) for v in self.u)
        object.__setattr__(self, "u", u)
        if len(u) < 1:
            raise ConfigError(f"scene {self.scene_id}: slot count K must be >= 1")
        if any(not (0.0 < v <= 1.0) for v in u):
            raise ConfigError(f"scene {self.scene_id}: slot factors must lie in (0, 1]")
        if any(a < b for a, b in zip(u, u[1:])):
            raise ConfigError(f"scene {self.scene_id}: slot factors must be non-increasing")

    @property
    def K(self) -> int:
        return len(self.u)


@dataclass(frozen=True)
class AuctionOutcome:
    won: bool
    slot_won: Optional[int]
    cost: Optional[float]
    wp: float


def min_winning_price(competitor_bids: Sequence[float], K: int) -> float:
    bids = sorted((float(b) for b in competitor_bids), reverse=True)
    if K < 1 or len(bids) < K:
        raise ConfigError(f"need at least K={K} competitor bids, got {len(bids)}")
    return bids[K - 1]


def run_auction(focal_bid: float, competitor_bids: Sequence[float], profile: SlotProfile) -> AuctionOutcome:
    K = profile.K
    bids = sorted((float(b) for b in competitor_bids), reverse=True)
    if len(bids) < K + 1:
        raise ConfigError(f"need at least K+1={K + 1} competitor bids, got {len(bids)}")
    if not focal_bid > 0:
        raise ConfigError("focal bid must be positive")
    wp = bids[K - 1]
    rank = 1 + sum(1 for b in bids if b > focal_bid)
    if rank > K:
        return AuctionOutcome(False, None, None, wp)
    below = [b for b in bids if b < focal_bid]
    cost = below[0] if below else float(focal_bid)
    return AuctionOutcome(True, rank, cost, wp)


def resolve_auctions(bids, competitors, n_valid, K):
    """Vectorized GSP resolution.

    Parameters
    ----------
    bids : (n,) focal bids, > 0
    competitors : (n, M_max) competitor bids sorted descending; columns at
        or beyond ``n_valid`` are padding and ignored
    n_valid : (n,) number of real competitors per row (>= K + 1)
    K : (n,) slot count per row

    Returns ``won, slot, cost, wp`` with ``slot = 0`` and ``cost = nan``
    for lost auctions.
    """
    bids = np.asarray(bids, dtype=np.float64)
    competitors = np.asarray(competitors, dtype=np.float64)
    n, m_max = competitors.shape
    K = np.broadcast_to(np.asarray(K, dtype=np.int64), (n,))
    n_valid = np.broadcast_to(np.asarray(n_valid, dtype=np.int64), (n,))
    if np.any(n_valid < K + 1):
        raise ConfigError("every auction needs at least K+1 competitor bids")

    valid = np.arange(m_max)[None, :] < n_valid[:, None]
    b = bids[:, None]
    n_above = np.sum(valid & (competitors > b), axis=1)
    won = n_above < K
    slot = np.where(won, n_above + 1, 0)
    wp = competitors[np.arange(n), K - 1]

    below = np.where(valid & (competitors < b), competitors, -np.inf).max(axis=1)
    cost = np.where(np.isfinite(below), below, bids)
    cost = np.where(won, cost, np.nan)
    return won, slot, cost, wp
