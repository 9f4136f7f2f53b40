"""Budget control: find the mu0 whose expected spend exhausts the budget."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, InfeasibleBudget, MonotonicityViolation
from .mebs import CalibrationModel, CostBidRatio, WinRateModel


@dataclass
class CampaignState:
    budget: float
    spend: float = 0.0
    mu0: float = 1.0
    tol: float = 0.01

    def __post_init__(self):
        if not self.budget > 0:
            raise ConfigError("budget must be positive")
        if not self.mu0 > 0:
            raise ConfigError("mu0 must be positive")

    @property
    def solved(self) -> bool:
        return abs(self.spend - self.budget) <= self.tol * self.budget


@dataclass
class Replay:
    """Requests the controller prices: features, ad values and upstream pCTR."""

    features: np.ndarray
    value: np.ndarray
    upstream_pctr: np.ndarray
    scene_col: int = 1

    def __len__(self):
        return len(self.value)

    @classmethod
    def from_dataset(cls, ds) -> "Replay":
        return cls(ds.features, ds.value, ds.upstream_pctr, ds.field_names.index("scene"))


def expected_cost(replay: Replay, mu0: float, policy: Callable, wr: WinRateModel, calib: Optional[CalibrationModel],
                  rcb: CostBidRatio) -> float:
    """sum_i P(x, b_i) pCTR_k(x, b_i) r_cb b_i with b_i = policy(x_i, mu0 V_i).

    ``policy(features, unshaded, pctr)`` returns bids. The slot under a
    hypothetical bid is unknown, so r_cb is the scene-level ratio. Without a
    calibration model the upstream pCTR is used.
    """
    if len(replay) == 0:
        raise ConfigError("expected cost needs a non-empty replay")
    U = mu0 * np.asarray(replay.value, dtype=np.float64)
    b = np.asarray(policy(replay.features, U, replay.upstream_pctr), dtype=np.float64)
    P = wr.predict(replay.features, b)
    pk = replay.upstream_pctr if calib is None else calib.predict(replay.features, b, replay.upstream_pctr)
    r_cb = rcb.scene_ratio(np.asarray(replay.features)[:, replay.scene_col])
    return float(np.sum(P * pk * r_cb * b))


@dataclass
class SolverReport:
    mu0: float
    cost: float
    budget: float
    residual: float
    iterations: int
    converged: bool
    bracket_history: list = field(default_factory=list)
    evaluations: list = field(default_factory=list)
    monotonicity_violations: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def bisect_mu0(cost_fn: Callable[[float], float], budget: float, bracket=(0.1, 10.0), tol: float = 0.01,
               max_widen: int = 12, max_iter: int = 200, check_monotone: bool = True) -> SolverReport:
    """Bisection on log mu0 until |cost - B| <= tol B or the bracket is
    narrower than 1e-6. The bracket is widened geometrically (x4 per side)
    before declaring the budget infeasible."""
    if not budget > 0:
        raise ConfigError("budget must be positive")
    lo, hi = float(bracket[0]), float(bracket[1])
    if not 0 < lo < hi:
        raise ConfigError("bracket must satisfy 0 < low < high")
    evals = {}

    def f(m):
        if m not in evals:
            evals[m] = float(cost_fn(m))
        return evals[m]

    history = [(lo, hi)]
    for _ in range(max_widen):
        c_lo, c_hi = f(lo), f(hi)
        if c_lo <= budget <= c_hi:
            break
        if c_lo > budget:
            lo /= 4.0
        if c_hi < budget:
            hi *= 4.0
        history.append((lo, hi))
    c_lo, c_hi = f(lo), f(hi)
    if not c_lo <= budget <= c_hi:
        raise InfeasibleBudget(budget, c_lo, c_hi)

    it, mid, c_mid = 0, lo, c_lo
    converged = False
    for it in range(1, max_iter + 1):
        mid = math.sqrt(lo * hi)
        c_mid = f(mid)
        if abs(c_mid - budget) <= tol * budget:
            converged = True
            break
        if c_mid < budget:
            lo = mid
        else:
            hi = mid
        history.append((lo, hi))
        if hi - lo < 1e-6:
            break
    pts = sorted(evals.items())
    viol = [(a[0], a[1], b[0], b[1]) for a, b in zip(pts, pts[1:]) if b[1] < a[1]]
    report = SolverReport(mid, c_mid, budget, (c_mid - budget) / budget, it, converged, history,
                          [list(p) for p in pts], [list(v) for v in viol])
    if viol and check_monotone:
        raise MonotonicityViolation(
            f"expected cost decreased with mu0 at {len(viol)} point pair(s), first {viol[0]}", report)
    return report


def solve_mu0(replay: Replay, budget: float, policy: Callable, wr: WinRateModel, calib: Optional[CalibrationModel],
              rcb: CostBidRatio, bracket=(0.1, 10.0), tol: float = 0.01, check_monotone: bool = True) -> SolverReport:
    def cost(m):
        return expected_cost(replay, m, policy, wr, calib, rcb)

    return bisect_mu0(cost, budget, bracket, tol, check_monotone=check_monotone)


def fixed_ratio(r: float) -> Callable:
    def policy(features, unshaded, pctr):
        return r * np.asarray(unshaded, dtype=np.float64)
    return policy


def shading_policy(model) -> Callable:
    """Adapter from a ShadingModel to the (features, unshaded, pctr) signature."""
    def policy(features, unshaded, pctr):
        return model.shade(features, unshaded, pctr)[1]
    return policy
