"""Closed-form ground truth for a LandscapeSpec.

With M i.i.d. competitor bids of CDF G, a focal bid b wins slot j with
probability ``C(M, j-1) (1-G)^(j-1) G^(M-j+1)``. Conditional on slot j the
payment is the maximum of the ``n = M-j+1`` competitors below b, whose mean
is ``b - I_n(b) / G(b)^n`` with ``I_n(b) = int_0^b G(c)^n dc``. The integral
is taken with the trapezoid rule on a fine grid that contains every
requested bid, or exactly for point-mass competitors (scale 0).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.special import comb, ndtr

from .landscape import LandscapeSpec

QUAD_POINTS = 4096


@dataclass
class TruthCurves:
    """Ground truth on a bid grid; every array is (n, G)."""

    bids: np.ndarray
    win_prob: np.ndarray      # P(b >= wp)
    click_win: np.ndarray     # F = P(won and clicked)
    cost_click: np.ndarray    # E[cost * 1{won and clicked}]

    @property
    def pctr_slot(self) -> np.ndarray:
        """Click probability given a win, pCTR_k(x, b)."""
        p = self.win_prob
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(p > 0, self.click_win / np.where(p > 0, p, 1.0), 0.0)

    @property
    def cost(self) -> np.ndarray:
        """Expected payment given a click, C(b)."""
        f = self.click_win
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(f > 0, self.cost_click / np.where(f > 0, f, 1.0), 0.0)

    def surplus(self, unshaded) -> np.ndarray:
        """Expected surplus (mu0 V - C(b)) P(x, b) pCTR_k(x, b).

        Evaluated in exactly this factored form so a grid search fed with the
        same three factors reproduces it bit for bit.
        """
        u = np.asarray(unshaded, dtype=np.float64)[:, None]
        return (u - self.cost) * self.win_prob * self.pctr_slot


def _cdf(b, loc, scale):
    """Log-normal CDF; scale 0 is a point mass at exp(loc)."""
    b = np.asarray(b, dtype=np.float64)
    with np.errstate(divide="ignore"):
        lb = np.log(np.maximum(b, 1e-300))
    point = scale == 0
    safe = np.where(point, 1.0, scale)
    g = ndtr((lb - loc) / safe)
    return np.where(point, (b >= np.exp(loc)).astype(np.float64), g)


def truth_curves(landscape: LandscapeSpec, features, scale, ratios, block: int = 256) -> TruthCurves:
    """Ground truth at bids ``scale[i] * ratios[g]`` for each row i.

    ``ratios`` must be positive and strictly increasing; sharing it across
    rows keeps the quadrature vectorized.
    """
    features = np.asarray(features)
    scale = np.asarray(scale, dtype=np.float64)
    ratios = np.asarray(ratios, dtype=np.float64)
    if np.any(np.diff(ratios) <= 0) or ratios[0] <= 0:
        raise ValueError("ratios must be positive and strictly increasing")
    parts = [
        _truth_block(landscape, features[i:i + block], scale[i:i + block], ratios)
        for i in range(0, len(scale), block)
    ]
    return TruthCurves(*(np.concatenate([getattr(p, k) for p in parts]) for k in
                         ("bids", "win_prob", "click_win", "cost_click")))


def _truth_block(landscape, features, scale, ratios) -> TruthCurves:
    loc, sig, M, K = landscape.competitor_params(features)
    q = landscape.click_propensity(features)
    u = landscape.slot_factor_matrix()[landscape.scene_of(features)]

    fine = np.union1d(np.linspace(0.0, ratios[-1], QUAD_POINTS + 1), ratios)
    at = np.searchsorted(fine, ratios)
    tb = scale[:, None] * fine[None, :]
    gf = _cdf(tb, loc[:, None], sig[:, None])
    g = gf[:, at]
    bids = tb[:, at]

    n = len(scale)
    n_grid = len(ratios)
    win = np.zeros((n, n_grid))
    click = np.zeros((n, n_grid))
    cost = np.zeros((n, n_grid))
    point = sig == 0
    for j in range(1, landscape.k_max + 1):
        active = j <= K
        if not active.any():
            break
        below = (M - j + 1).astype(np.float64)
        pj = comb(M, j - 1)[:, None] * (1 - g) ** (j - 1) * g ** below[:, None]
        pj = np.where(active[:, None], pj, 0.0)
        # I_n(b) = int_0^b G(c)^n dc
        integ = scale[:, None] * cumulative_trapezoid(gf ** below[:, None], fine, initial=0.0, axis=1)[:, at]
        exact = np.maximum(bids - np.exp(loc)[:, None], 0.0)
        integ = np.where(point[:, None], exact, integ)
        paid = comb(M, j - 1)[:, None] * (1 - g) ** (j - 1) * (g ** below[:, None] * bids - integ)
        paid = np.where(active[:, None], np.maximum(paid, 0.0), 0.0)
        uj = u[:, j - 1][:, None]
        win += pj
        click += pj * uj
        cost += paid * uj
    return TruthCurves(bids=bids, win_prob=win, click_win=q[:, None] * click, cost_click=q[:, None] * cost)


def true_win_prob(landscape: LandscapeSpec, features, bids) -> np.ndarray:
    """P(b >= wp) for one bid per row (no quadrature needed)."""
    loc, sig, M, K = landscape.competitor_params(features)
    g = _cdf(np.asarray(bids, dtype=np.float64), loc, sig)
    total = np.zeros_like(g)
    for j in range(1, landscape.k_max + 1):
        pj = comb(M, j - 1) * (1 - g) ** (j - 1) * g ** (M - j + 1)
        total += np.where(j <= K, pj, 0.0)
    return total
