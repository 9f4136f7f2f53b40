import numpy as np
import pytest
from scipy.stats import rankdata

from bidshade.auction_sim import generate_dataset
from bidshade.errors import DataError, DomainError, TrainingError, UsageError
from bidshade.evaluation import pcoc
from bidshade.mebs import (
    CalibrationModel, CostBidRatio, MebsConfig, ShadingModel, Standardizer, WinRateModel, _net, calibrated_pctr,
    estimate_cost_bid_ratio, expected_surplus, load_bundle, predict_win_rate, shade, surplus_loss,
    train_calibration, train_shading, train_win_rate,
)
from bidshade.model_core import Tape, TrainConfig, autodiff as ad, grad_check

from conftest import make_dataset, random_features

VOC = (4, 2, 6, 3, 3, 2)
FAST = dict(win_rate=TrainConfig(lr=1e-2, batch_size=512, epochs=15, patience=3),
            calibration=TrainConfig(lr=5e-3, batch_size=512, epochs=15, patience=3),
            shading=TrainConfig(lr=5e-3, batch_size=512, epochs=10, patience=3))


def auc(score, y):
    r = rankdata(score)
    pos = y.astype(bool)
    n1, n0 = pos.sum(), (~pos).sum()
    return (r[pos].sum() - n1 * (n1 + 1) / 2) / (n1 * n0)


# -- win rate ------------------------------------------------------------------

@pytest.fixture(scope="module")
def separable():
    rng = np.random.default_rng(0)
    n = 6000
    b = rng.uniform(1, 20, n)
    ds = make_dataset(random_features(n, rng), shaded_bid=b, wp=np.full(n, 10.0), vocab=VOC)
    return ds.subset(np.arange(5000)), ds.subset(np.arange(5000, n))


def test_win_rate_separable(separable):
    train, test = separable
    wr, h = train_win_rate(train, MebsConfig(seed=1, **FAST))
    P = predict_win_rate(wr, test.features, test.shaded_bid)
    assert auc(P, test.won) > 0.98
    assert abs(P.mean() / test.won.mean() - 1) < 0.10
    assert min(h.val) < h.initial_val
    assert wr.net.embedding.frozen and wr.trained


def test_win_rate_single_class_is_error():
    rng = np.random.default_rng(0)
    ds = make_dataset(random_features(100, rng), shaded_bid=np.full(100, 20.0), wp=np.full(100, 1.0), vocab=VOC)
    with pytest.raises(TrainingError):
        train_win_rate(ds)


def test_win_rate_against_landscape(small_bundle, land):
    from bidshade.auction_sim import sample_auctions
    wr = small_bundle.win_rate
    b = sample_auctions(land, 3000, seed=77)
    high = np.full(len(b), b.competitors.max() * 3)
    assert np.mean(wr.predict(b.features, high) > 0.95) >= 0.95
    assert np.mean(wr.predict(b.features, np.zeros(len(b))) < 0.05) >= 0.95
    rng = np.random.default_rng(0)
    lo = rng.uniform(0.1, 3.0, len(b))
    hi = lo + rng.uniform(0.01, 2.0, len(b))
    assert np.mean(wr.predict(b.features, lo) <= wr.predict(b.features, hi)) >= 0.95


# -- calibration ---------------------------------------------------------------

def test_calibration_identity_teacher():
    """Clicks drawn at exactly the upstream pCTR: the learned factor stays near 0."""
    rng = np.random.default_rng(3)
    n = 40_000
    p = rng.uniform(0.05, 0.4, n)
    b = rng.uniform(1, 10, n)
    ds = make_dataset(random_features(n, rng), shaded_bid=b, wp=rng.uniform(1, 10, n), upstream_pctr=p,
                      clicked=rng.random(n) < p, vocab=VOC)
    cfg = MebsConfig(seed=2, **FAST)
    wr, _ = train_win_rate(ds, cfg)
    emb = wr.net.embedding.weights.tobytes()
    calib, _ = train_calibration(ds, wr, cfg)
    assert wr.net.embedding.weights.tobytes() == emb
    hold = random_features(2000, rng)
    f = calib.predict_factor(hold, rng.uniform(1, 10, 2000))
    assert np.mean(np.abs(f)) < 0.1


def test_calibration_requires_trained_win_rate(small_ds):
    cfg = MebsConfig()
    net = _net("win_rate", VOC, ("bid",), cfg)
    with pytest.raises(UsageError):
        train_calibration(small_ds, WinRateModel(net, Standardizer("log1p")), cfg)


def test_calibration_without_winnable_is_error():
    rng = np.random.default_rng(0)
    ds = make_dataset(random_features(200, rng), shaded_bid=np.full(200, 1.0),
                      wp=np.r_[np.full(100, 0.5), np.full(100, 5.0)], vocab=VOC)
    wr, _ = train_win_rate(ds, MebsConfig(**FAST))
    ds2 = ds.subset(np.arange(100, 200))
    with pytest.raises(TrainingError):
        train_calibration(ds2, wr, MebsConfig(**FAST))


def test_calibration_improves_pcoc(small_bundle, land):
    from bidshade.auction_sim import FixedRatioPolicy
    test = generate_dataset(land, FixedRatioPolicy(0.9), 60_000, seed=99)
    w = test.won
    cal = small_bundle.calibration.predict(test.features[w], test.shaded_bid[w], test.upstream_pctr[w])
    assert abs(pcoc(cal, test.clicked[w]) - 1) < abs(pcoc(test.upstream_pctr[w], test.clicked[w]) - 1)


def test_calibrated_pctr_examples():
    p = np.array([0.05, 0.3, 0.9])
    assert np.array_equal(calibrated_pctr(np.zeros(3), p), p)
    out = calibrated_pctr(np.array([40.0, -40.0, 3.0]), p)
    assert np.all((out > 0) & (out < 1))
    assert calibrated_pctr(np.log(3.0), 0.25) == pytest.approx(0.5)
    for bad in (0.0, 1.0, -0.1, np.nan):
        with pytest.raises(DomainError):
            calibrated_pctr(0.0, bad)


# -- cost-bid ratio ------------------------------------------------------------

def _won_ds(ratios, scene, slot, support_vocab=VOC):
    n = len(ratios)
    rng = np.random.default_rng(0)
    X = random_features(n, rng)
    X[:, 1] = scene
    b = np.full(n, 10.0)
    return make_dataset(X, shaded_bid=b, wp=np.full(n, 1.0), slot_won=np.asarray(slot),
                        cost=b * np.asarray(ratios), vocab=support_vocab)


def test_cost_bid_ratio_constant():
    ds = _won_ds(np.full(300, 0.8), np.arange(300) % 2, 1 + np.arange(300) % 3)
    rcb = estimate_cost_bid_ratio(ds, support=50)
    assert np.allclose(rcb.cell, 0.8) and np.allclose(rcb.scene, 0.8) and rcb.global_ratio == pytest.approx(0.8)


def test_cost_bid_ratio_fallback_and_hand_mean():
    ratios = np.r_[np.full(60, 0.5), np.full(10, 1.0)]
    ds = _won_ds(ratios, np.r_[np.zeros(60, int), np.ones(10, int)], np.ones(70, int))
    rcb = estimate_cost_bid_ratio(ds, support=50)
    assert rcb.lookup(1, 1) == pytest.approx(ratios.mean())      # 10 samples: global fallback
    assert rcb.lookup(0, 1) == pytest.approx(0.5)
    two = estimate_cost_bid_ratio(_won_ds([0.6, 1.0], [0, 0], [1, 1]), support=2)
    assert two.lookup(0, 1) == pytest.approx(0.8)


def test_cost_bid_ratio_needs_won_records():
    rng = np.random.default_rng(0)
    ds = make_dataset(random_features(5, rng), shaded_bid=np.ones(5), wp=np.full(5, 2.0), vocab=VOC)
    with pytest.raises(DataError):
        estimate_cost_bid_ratio(ds)


def test_cost_bid_ratio_dict_roundtrip(small_bundle):
    r = small_bundle.rcb
    back = CostBidRatio.from_dict(r.to_dict())
    np.testing.assert_array_equal(back.lookup([0, 1, 2], [1, 2, 3]), r.lookup([0, 1, 2], [1, 2, 3]))
    assert np.all((r.cell[np.isfinite(r.cell)] > 0) & (r.cell[np.isfinite(r.cell)] <= 1))


# -- surplus loss --------------------------------------------------------------

def _tiny_models(seed=0):
    cfg = MebsConfig(embed_dim=3, hidden=(5, 4), dtype="float64", seed=seed)
    wr = WinRateModel(_net("win_rate", VOC, ("bid",), cfg, seed=1), Standardizer("log1p", 1.0, 0.7))
    cal = CalibrationModel(_net("calibration", VOC, ("bid",), cfg, embedding=wr.net.embedding, seed=2),
                           wr.bid_enc)
    sh = ShadingModel(_net("shading", VOC, ("unshaded_bid", "pctr"), cfg, embedding=wr.net.embedding, seed=3),
                      wr.bid_enc, Standardizer("logit", -2.0, 0.5))
    # nonzero biases so no ReLU input sits exactly on the kink
    rng = np.random.default_rng(seed + 77)
    for m in (wr, cal, sh):
        for k, v in m.net.params.items():
            if k[0] == "b" and k != "b_out":
                v[:] = rng.uniform(-0.3, 0.3, v.shape)
    return wr, cal, sh


def _tiny_batch(n=10, seed=0):
    rng = np.random.default_rng(seed)
    return random_features(n, rng), rng.uniform(1.0, 5.0, n), rng.uniform(0.02, 0.3, n), rng.uniform(0.5, 0.9, n)


def test_surplus_loss_value_and_gradient_identity():
    wr, cal, sh = _tiny_models()
    X, U, p, rcb = _tiny_batch()
    t = Tape()
    r = sh.ratio(t, X, U, p, trainable=True)
    es = expected_surplus(t, wr, cal, X, r * U, U, p, rcb).es
    loss = surplus_loss(es)
    assert float(loss.value) == pytest.approx(-1.0, abs=1e-6)
    t.backward(loss)
    g1 = t.grads()

    t2 = Tape()
    r2 = sh.ratio(t2, X, U, p, trainable=True)
    es2 = expected_surplus(t2, wr, cal, X, r2 * U, U, p, rcb).es
    t2.backward(-ad.mean(ad.log(es2)))
    g2 = t2.grads()
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-9, atol=1e-15)


def test_surplus_loss_degenerate_branch():
    t = Tape()
    es = t.var(np.array([1e-12, 2.0]), "es")
    loss = surplus_loss(es, eps=1e-8)
    assert float(loss.value) == pytest.approx(-(1e-12 / 1e-8 + 1.0) / 2)


def test_surplus_factorization(small_bundle, small_ds):
    sub = small_ds.subset(small_ds.winnable)
    X, U, p = sub.features[:500], sub.unshaded_bid[:500], sub.upstream_pctr[:500]
    rcb = small_bundle.rcb.scene_ratio(sub.scene_id[:500])
    t = Tape()
    r, b = small_bundle.shading.shade(X, U, p)
    term = expected_surplus(t, small_bundle.win_rate, small_bundle.calibration, X, t.const(b), U, p, rcb).numpy()
    np.testing.assert_allclose(term["margin"] * term["P"] * term["pctr_k"], term["es"], rtol=1e-6)
    assert np.all((term["P"] > 0) & (term["P"] < 1)) and np.all((term["pctr_k"] > 0) & (term["pctr_k"] < 1))
    assert np.all(U - rcb * b == pytest.approx(term["margin"]))


def _grad_tensors(*models, extra=None):
    out = {}
    for m in models:
        out.update({f"{m.net.name}/{k}": v for k, v in m.net.params.items()})
    out[f"{models[0].net.name}/embedding"] = models[0].net.embedding.weights
    out.update(extra or {})
    return out


H = 1e-6


def _check_sr(build_es, tensors):
    """L_SR is constant in value, so its tape gradient is checked against
    finite differences of -mean(log E), whose gradient it equals."""
    err = grad_check(lambda t: -ad.mean(ad.log(build_es(t))), tensors, h=H)
    t1, t2 = Tape(), Tape()
    t1.backward(surplus_loss(build_es(t1)))
    t2.backward(-ad.mean(ad.log(build_es(t2))))
    for k in tensors:
        np.testing.assert_allclose(t1.grads()[k], t2.grads()[k], rtol=1e-9, atol=1e-15)
    return err


def test_gradients_of_all_three_losses():
    wr, cal, sh = _tiny_models()
    X, U, p, rcb = _tiny_batch(8, seed=4)
    y = np.array([1, 0, 1, 1, 0, 0, 1, 0], dtype=float)

    def l_wr(t):
        return ad.mean(ad.bce_with_logits(wr.logits(t, X, t.var(U, "bid"), trainable=True), y))

    assert grad_check(l_wr, _grad_tensors(wr, extra={"bid": U}), h=H) < 1e-4

    wr.net.embedding.frozen = True
    z0 = np.log(p / (1 - p))

    def l_cal(t):
        f = cal.factor(t, X, t.var(U, "bid"), trainable=True)
        return ad.mean(ad.bce_with_logits(f + z0, y))

    cal_t = {f"calibration/{k}": v for k, v in cal.net.params.items()}
    cal_t["bid"] = U
    assert grad_check(l_cal, cal_t, h=H) < 1e-4

    # gradients reach the shading net through the bid inputs of frozen models
    def es_sr(t):
        r = sh.ratio(t, X, U, p, trainable=True)
        return expected_surplus(t, wr, cal, X, r * U, U, p, rcb).es

    sh_t = {f"shading/{k}": v for k, v in sh.net.params.items()}
    assert _check_sr(es_sr, sh_t) < 1e-4

    b0 = U * 0.7

    def es_bid(t):
        return expected_surplus(t, wr, cal, X, t.var(b0, "b"), U, p, rcb).es

    assert _check_sr(es_bid, {"b": b0}) < 1e-4


# -- shading -------------------------------------------------------------------

def test_shade_contract(small_bundle, small_ds):
    sh = small_bundle.shading
    X, U, p = small_ds.features[:2000], small_ds.unshaded_bid[:2000], small_ds.upstream_pctr[:2000]
    r, b = shade(sh, X, U, p)
    assert np.all((r >= 0.1) & (r <= 1)) and np.all(b <= U) and np.all(b >= 0.1 * U)
    r2, _ = shade(sh, X, U, p)
    assert np.array_equal(r, r2)
    with pytest.raises(DomainError):
        sh.shade(X[:2], np.array([1.0, 0.0]), p[:2])


def test_shade_single_forward_pass(small_bundle, small_ds):
    net = small_bundle.shading.net
    calls = []
    orig = net.forward
    net.forward = lambda *a, **k: calls.append(1) or orig(*a, **k)
    try:
        _, timing = small_bundle.infer(small_ds.features[:100], small_ds.unshaded_bid[:100],
                                       small_ds.upstream_pctr[:100])
    finally:
        del net.forward
    assert len(calls) == 1 and timing["search"] == 0.0 and timing["forward_passes"] == 1


def test_shading_requires_trained_models(small_ds, small_bundle):
    cfg = MebsConfig()
    wr = WinRateModel(_net("win_rate", small_ds.meta.vocab, ("bid",), cfg), small_bundle.win_rate.bid_enc)
    with pytest.raises(UsageError):
        train_shading(small_ds, wr, small_bundle.calibration, small_bundle.rcb, cfg)


def test_training_leaves_shared_embedding_untouched(small_ds):
    cfg = MebsConfig(seed=5, **FAST)
    sub = small_ds.subset(np.arange(15_000))
    wr, _ = train_win_rate(sub, cfg)
    before = wr.net.embedding.weights.tobytes()
    cal, _ = train_calibration(sub, wr, cfg)
    sh, _ = train_shading(sub, wr, cal, estimate_cost_bid_ratio(sub), cfg)
    assert wr.net.embedding.weights.tobytes() == before
    assert cal.net.embedding is wr.net.embedding is sh.net.embedding


def test_bundle_roundtrip(tmp_path, small_bundle, small_ds):
    small_bundle.save(tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "b").iterdir())
    assert names == ["calibration.json", "manifest.json", "shading.json", "win_rate.json"]
    back = load_bundle(tmp_path / "b")
    X, U, p = small_ds.features[:500], small_ds.unshaded_bid[:500], small_ds.upstream_pctr[:500]
    assert np.array_equal(back.shading.shade(X, U, p)[1], small_bundle.shading.shade(X, U, p)[1])
    assert back.shading.net.embedding is back.win_rate.net.embedding
    assert back.landscape_fingerprint == small_bundle.landscape_fingerprint
