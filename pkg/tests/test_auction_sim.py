import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bidshade.auction_sim import (
    FixedRatioPolicy, SlotProfile, generate_dataset, logging_policy, make_landscape, min_winning_price,
    read_dataset, resolve_auctions, run_auction, sample_auctions, simulate_click, write_dataset,
)
from bidshade.auction_sim.dataset import meta_path
from bidshade.errors import ConfigError, DataError, FingerprintMismatch

PROFILE3 = SlotProfile(0, (0.10, 0.06, 0.04))


# -- run_auction / min_winning_price ---------------------------------------------

@pytest.mark.parametrize("focal, won, slot, cost", [
    (9, True, 2, 8.0),
    (5, True, 3, 3.0),     # tie with the wp competitor goes to the focal bidder
    (4, False, None, None),
])
def test_run_auction_examples(focal, won, slot, cost):
    out = run_auction(focal, [10, 8, 5, 3], PROFILE3)
    assert (out.won, out.slot_won, out.cost, out.wp) == (won, slot, cost, 5.0)


def test_run_auction_unsorted_input_and_top_slot():
    out = run_auction(11, [3, 10, 5, 8], PROFILE3)
    assert (out.won, out.slot_won, out.cost, out.wp) == (True, 1, 10.0, 5.0)


def test_run_auction_all_ties_pay_own_bid():
    out = run_auction(4, [4, 4, 4, 4], PROFILE3)
    assert out.won and out.slot_won == 1 and out.cost == 4.0


def test_run_auction_needs_k_plus_one_competitors():
    with pytest.raises(ConfigError):
        run_auction(5, [10, 8, 5], PROFILE3)
    with pytest.raises(ConfigError):
        run_auction(0, [10, 8, 5, 3], PROFILE3)


@pytest.mark.parametrize("bids, K, wp", [([10, 8, 5, 3], 3, 5), ([7], 1, 7), ([4, 4, 4], 2, 4)])
def test_min_winning_price_examples(bids, K, wp):
    assert min_winning_price(bids, K) == wp


def test_min_winning_price_too_few():
    with pytest.raises(ConfigError):
        min_winning_price([3, 2], 3)


def test_slot_profile_validation():
    with pytest.raises(ConfigError):
        SlotProfile(0, ())
    with pytest.raises(ConfigError):
        SlotProfile(0, (0.5, 0.6))
    with pytest.raises(ConfigError):
        SlotProfile(0, (1.2,))
    with pytest.raises(ConfigError):
        SlotProfile(0, (0.5, 0.0))


bid_st = st.integers(1, 40).map(float)


@given(focal=bid_st, comps=st.lists(bid_st, min_size=4, max_size=9), K=st.integers(1, 3))
def test_scalar_and_vector_resolution_agree(focal, comps, K):
    prof = SlotProfile(0, tuple(1.0 / (k + 1) for k in range(K)))
    out = run_auction(focal, comps, prof)
    c = np.array(sorted(comps, reverse=True))[None, :]
    won, slot, cost, wp = resolve_auctions([focal], c, [len(comps)], [K])
    assert bool(won[0]) == out.won and wp[0] == out.wp
    if out.won:
        assert slot[0] == out.slot_won and cost[0] == out.cost
    # wp does not depend on the focal bid and won <=> b >= wp
    assert out.won == (focal >= out.wp)
    assert out.wp == min_winning_price(comps, K)


@given(focal=bid_st, comps=st.lists(bid_st, min_size=4, max_size=8), perm_seed=st.integers(0, 2**16))
def test_permutation_invariance(focal, comps, perm_seed):
    perm = list(np.random.default_rng(perm_seed).permutation(comps))
    assert run_auction(focal, comps, PROFILE3) == run_auction(focal, perm, PROFILE3)


@given(lo=bid_st, step=st.integers(0, 20), comps=st.lists(bid_st, min_size=4, max_size=8))
def test_raising_the_bid_never_hurts_rank(lo, step, comps):
    a = run_auction(lo, comps, PROFILE3)
    b = run_auction(lo + step, comps, PROFILE3)
    assert not (a.won and not b.won)
    if a.won:
        assert b.slot_won <= a.slot_won


def test_vectorized_invariants_over_1e5_auctions(land):
    batch = sample_auctions(land, 100_000, seed=5)
    rng = np.random.default_rng(0)
    bids = np.round(batch.value * rng.uniform(0.05, 1.5, len(batch)) * 1000) / 1000 + 0.001
    won, slot, cost, wp = resolve_auctions(bids, batch.competitors, batch.n_competitors, batch.K)
    assert np.all(cost[won] <= bids[won])
    assert np.array_equal(won, bids >= wp)
    assert np.all((slot >= 1)[won]) and np.all(slot[won] <= batch.K[won]) and np.all(slot[~won] == 0)


# -- landscape -------------------------------------------------------------------

def test_landscape_validation_names_field():
    with pytest.raises(ConfigError, match="ad_bucket"):
        make_landscape("trainable", vocab={"ad_bucket": 0})
    with pytest.raises(ConfigError):
        make_landscape("no-such-preset")


def test_landscape_invariants(land):
    for s, p in enumerate(land.profiles):
        assert land.n_competitors[s] >= p.K + 1
    X = sample_auctions(land, 5000, seed=1).features
    q = land.click_propensity(X)
    assert np.all((q > 0) & (q < 1))
    assert np.all(q * land.slot_factor_matrix()[land.scene_of(X), 0] <= 1)


def test_landscape_roundtrip_fingerprint(land):
    from bidshade.auction_sim import LandscapeSpec
    again = LandscapeSpec.from_dict(land.to_dict())
    assert again.fingerprint() == land.fingerprint()
    assert make_landscape("trainable", seed=1).fingerprint() != land.fingerprint()


# -- clicks ------------------------------------------------------------------------

def _one_scene_landscape(q_bias, u):
    base = make_landscape("trainable", vocab={"scene": 1}, q_bias=q_bias)
    zeros = {k: np.zeros_like(getattr(base, k)) for k in ("q_user", "q_ad", "q_category", "q_device")}
    return make_landscape("trainable", vocab={"scene": 1}, q_bias=q_bias,
                          profiles=(SlotProfile(0, u),), n_competitors=(len(u) + 5,), **zeros)


def test_simulate_click_extremes():
    rng = np.random.default_rng(0)
    x = np.zeros((1, 6), dtype=np.int64)
    never = _one_scene_landscape(-800.0, (1.0, 0.5))
    always = _one_scene_landscape(800.0, (1.0, 1.0))
    assert not any(simulate_click(1, x, never, rng) for _ in range(200))
    assert all(simulate_click(2, x, always, rng) for _ in range(200))
    with pytest.raises(DataError):
        simulate_click(3, x, always, rng)


def test_simulate_click_frequency():
    # q = 0.2, u_2 = 0.5 -> rate 0.10
    land = _one_scene_landscape(float(np.log(0.2 / 0.8)), (1.0, 0.5))
    x = np.zeros((1, 6), dtype=np.int64)
    assert land.click_propensity(x)[0] == pytest.approx(0.2)
    rng = np.random.default_rng(42)
    n = 100_000
    k = sum(simulate_click(2, x, land, rng) for _ in range(n))
    assert abs(k / n - 0.10) < 3 * np.sqrt(0.1 * 0.9 / n)


# -- dataset generation -------------------------------------------------------------

def test_dataset_invariants(small_ds):
    ds = small_ds
    m = ds.meta
    assert m.N == len(ds) and m.N >= m.N_plus >= m.N_won >= m.N_clicked >= 0
    assert np.all((ds.shaded_bid > 0) & (ds.shaded_bid <= ds.unshaded_bid))
    assert np.array_equal(ds.won, ds.shaded_bid >= ds.wp)
    assert np.all(ds.cost[ds.won] <= ds.shaded_bid[ds.won])
    assert not np.any(ds.clicked & ~ds.won)
    assert np.array_equal(ds.original_slot == 0, ds.unshaded_bid < ds.wp)
    assert np.array_equal(ds.unshaded_bid, np.round(ds.mu0 * ds.value * 1000) / 1000)


def test_dataset_is_deterministic_and_thread_independent(land):
    a = generate_dataset(land, logging_policy(land), 30_000, seed=3)
    b = generate_dataset(land, logging_policy(land), 30_000, seed=3, threads=3)
    assert a.fingerprint() == b.fingerprint()
    assert generate_dataset(land, logging_policy(land), 30_000, seed=4).fingerprint() != a.fingerprint()


def test_dominant_bidder_wins_everything():
    land = make_landscape("trainable", value_base=30.0)   # values dwarf every competitor bid
    ds = generate_dataset(land, FixedRatioPolicy(1.0), 2000, seed=0)
    assert ds.meta.N_won == ds.meta.N == 2000


def test_rejected_bids_are_counted(land):
    def half_bad(req):
        b = req.unshaded_bid.copy()
        b[::2] = 0.0
        return b
    ds = generate_dataset(land, half_bad, 1000, seed=0)
    assert ds.meta.n_rejected == 500 and len(ds) == 500


def test_slot_click_factorization(land):
    ds = generate_dataset(land, FixedRatioPolicy(1.0), 400_000, seed=9)
    q = land.click_propensity(ds.features)
    u = land.slot_factor_matrix()
    for scene in range(land.n_scenes):
        for k in (1, 2):
            sel = ds.won & (ds.slot_won == k) & (ds.scene_id == scene)
            if sel.sum() < 2000:
                continue
            p = q[sel] * u[scene, k - 1]
            ctr = ds.clicked[sel].mean()
            se = np.sqrt(np.sum(p * (1 - p))) / sel.sum()
            assert abs(ctr - p.mean()) < 4 * se


def test_sparsity_presets():
    for preset, win, click in (("trainable", 0.05, 0.10), ("sparse", 0.0083, 0.0181)):
        land = make_landscape(preset)
        ds = generate_dataset(land, logging_policy(land), 300_000, seed=2)
        m = ds.meta
        assert abs(m.N_won / m.N / win - 1) < 0.2
        assert abs(m.N_clicked / m.N_won / click - 1) < 0.2


def test_jsonl_roundtrip(tmp_path, land):
    ds = generate_dataset(land, logging_policy(land), 1000, seed=7)
    p = tmp_path / "d.jsonl"
    write_dataset(p, ds, land)
    lines = p.read_text().splitlines()
    assert len(lines) == 1000
    rec = json.loads(lines[0])
    assert list(rec) == ["auction_id", "features", "scene_id", "value", "mu0", "unshaded_bid", "shaded_bid",
                         "upstream_pctr", "won", "slot_won", "cost", "wp", "original_slot", "clicked"]
    back = read_dataset(p, land)
    assert back.fingerprint() == ds.fingerprint()
    meta = json.loads(meta_path(p).read_text())
    assert meta["N"] == 1000 and meta["landscape_fingerprint"] == land.fingerprint()
    with pytest.raises(FingerprintMismatch):
        read_dataset(p, make_landscape("trainable", seed=5))
    with pytest.raises(DataError):
        read_dataset(tmp_path / "missing.jsonl")
