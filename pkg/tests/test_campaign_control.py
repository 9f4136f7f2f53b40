import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bidshade.auction_sim import sample_auctions, true_win_prob, truth_curves
from bidshade.campaign_control import (
    CampaignState, Replay, bisect_mu0, expected_cost, fixed_ratio, shading_policy, solve_mu0,
)
from bidshade.errors import ConfigError, InfeasibleBudget, MonotonicityViolation
from bidshade.mebs import CostBidRatio


class TrueWinRate:
    """Ground-truth P(x, b) in the model interface."""

    def __init__(self, land):
        self.land = land

    def predict(self, features, bid):
        return true_win_prob(self.land, features, bid)


class TrueSlotCtr:
    """Ground-truth click probability given a win, at each row's own bid."""

    def __init__(self, land):
        self.land = land

    def predict(self, features, bid, upstream):
        bid = np.asarray(bid, dtype=np.float64)
        out = np.empty(len(bid))
        for i in range(len(bid)):
            tc = truth_curves(self.land, features[i:i + 1], bid[i:i + 1], [1.0])
            out[i] = tc.pctr_slot[0, 0]
        return out


class Linear:
    """P = 1 and calibrated pCTR = 1, so expected cost is sum r_cb b."""

    def predict(self, features, bid, upstream=None):
        return np.ones(len(bid))


@pytest.fixture(scope="module")
def replay(land):
    b = sample_auctions(land, 300, seed=8)
    return Replay(b.features, b.value, b.upstream_pctr, land.col("scene"))


def test_campaign_state_validation():
    with pytest.raises(ConfigError):
        CampaignState(budget=0.0)
    with pytest.raises(ConfigError):
        CampaignState(budget=1.0, mu0=-1.0)
    assert CampaignState(100.0, spend=100.5, tol=0.01).solved


def test_expected_cost_closed_form(land, replay):
    rcb = CostBidRatio.constant(0.7, land.n_scenes, land.k_max)
    c = expected_cost(replay, 1.0, fixed_ratio(1.0), TrueWinRate(land), TrueSlotCtr(land), rcb)
    U = replay.value
    P = true_win_prob(land, replay.features, U)
    pk = truth_curves(land, replay.features, U, [1.0]).pctr_slot[:, 0]
    assert c == pytest.approx(float(np.sum(P * pk * 0.7 * U)), rel=1e-6)


def test_expected_cost_vanishes_as_mu0_shrinks(land, replay):
    rcb = CostBidRatio.constant(0.8, land.n_scenes, land.k_max)
    c = expected_cost(replay, 1e-4, fixed_ratio(0.1), TrueWinRate(land), None, rcb)
    assert c < 1e-9


def test_doubling_mu0_never_lowers_cost(land, replay, small_bundle):
    b = small_bundle
    last = 0.0
    for m in (0.25, 0.5, 1.0, 2.0, 4.0):
        c = expected_cost(replay, m, fixed_ratio(0.8), b.win_rate, b.calibration, b.rcb)
        assert c >= last
        last = c


def test_linear_root():
    rcb = CostBidRatio.constant(1.0)
    rep = Replay(np.zeros((4, 6), dtype=np.int64), np.array([1.0, 2.0, 3.0, 4.0]), np.full(4, 0.1), 1)
    # cost(mu0) = sum V * mu0 = 10 mu0
    out = solve_mu0(rep, 37.0, fixed_ratio(1.0), Linear(), Linear(), rcb, tol=1e-4)
    assert out.mu0 == pytest.approx(3.7, rel=1e-4)
    assert abs(out.cost - 37.0) <= 1e-4 * 37.0 and out.converged
    with pytest.raises(InfeasibleBudget) as e:
        bisect_mu0(lambda m: min(10 * m, 50.0), 80.0)
    assert e.value.achievable[1] == 50.0


@given(c=st.floats(0.1, 50.0), B=st.floats(1.0, 500.0))
def test_bisection_hits_tolerance(c, B):
    try:
        rep = bisect_mu0(lambda m: c * m, B)
    except InfeasibleBudget:
        return
    assert abs(rep.cost - B) <= 0.01 * B
    assert rep.mu0 == pytest.approx(B / c, rel=0.011)


def test_bracket_widening_and_report_json():
    rep = bisect_mu0(lambda m: 2.0 * m, 100.0, bracket=(0.1, 10.0))
    assert len(rep.bracket_history) > 1 and rep.bracket_history[0] == (0.1, 10.0)
    d = json.loads(rep.to_json())
    assert {"mu0", "iterations", "residual", "bracket_history"} <= set(d)


def test_monotonicity_violation_reported():
    def bumpy(m):
        return 10 * m - (8.0 if 1.2 < m < 2.5 else 0.0)
    with pytest.raises(MonotonicityViolation) as e:
        bisect_mu0(bumpy, 14.0, bracket=(0.5, 3.0), tol=1e-4)
    assert e.value.report is not None and e.value.report.monotonicity_violations


def test_solve_with_learned_models(replay, small_bundle):
    b = small_bundle
    pol = shading_policy(b.shading)
    B = expected_cost(replay, 1.5, pol, b.win_rate, b.calibration, b.rcb)
    rep = solve_mu0(replay, B, pol, b.win_rate, b.calibration, b.rcb, check_monotone=False)
    assert abs(rep.cost - B) <= 0.01 * B
