"""Comparison strategies: shading-ratio regression (SRR), two-step
distribution-plus-search shading (TSBS) and non-parametric binning (NPM),
plus the ground-truth grid oracle."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, logit

from .auction_sim.dataset import Dataset
from .auction_sim.landscape import LandscapeSpec
from .auction_sim.truth import TruthCurves, truth_curves
from .errors import DataError, TrainingError
from .mebs import (
    R_MIN, CalibrationModel, CostBidRatio, MebsConfig, ShadingModel, Standardizer, _load_ckpt,
    _net, _vocab, estimate_cost_bid_ratio, shading_targets, train_calibration,
)
from .model_core import autodiff as ad
from .model_core.checkpoint import model_to_dict
from .model_core.deepfm import DeepFM
from .model_core.training import fit


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)


def _read_manifest(directory, method):
    mp = Path(directory) / "manifest.json"
    if not mp.exists():
        raise DataError(f"bundle manifest not found in {directory}")
    with open(mp) as fh:
        man = json.load(fh)
    if man.get("method") != method:
        raise DataError(f"{directory} holds a '{man.get('method')}' bundle, not {method}")
    return man


def _save_net(path, model):
    _dump(path, model_to_dict(model.net, model.kind, model.hyper()))


# -- SRR -----------------------------------------------------------------------

class SrrModel(ShadingModel):
    """Ratio regression with the same head range as the MEBS shading model."""

    kind = "srr"


def train_srr(ds: Dataset, cfg: MebsConfig = None):
    """Squared error between r(x, mu0 V) and clip(wp / mu0 V, r_min, 1) on
    winnable records; the net owns its embedding."""
    cfg = cfg or MebsConfig()
    sub = ds.subset(ds.winnable)
    if len(sub) == 0:
        raise TrainingError("SRR training needs winnable records")
    target = shading_targets(sub, cfg.r_min)
    base = float(np.clip((target.mean() - cfg.r_min) / (1 - cfg.r_min), 1e-3, 1 - 1e-3))
    net = _net("srr", _vocab(ds), ("unshaded_bid", "pctr"), cfg, seed=cfg.seed * 10 + 5, init_bias=float(logit(base)))
    model = SrrModel(net, Standardizer.fit("log1p", ds.unshaded_bid), Standardizer.fit("logit", ds.upstream_pctr),
                     cfg.r_min)
    X, U, p = sub.features, sub.unshaded_bid, sub.upstream_pctr

    def batch_loss(tape, idx):
        r = ad.cast(model.ratio(tape, X[idx], U[idx], p[idx], trainable=True), np.float64)
        return ad.mean(ad.square(r - target[idx]))

    hist = fit(net.trainable_params(), batch_loss, len(sub), cfg.stage("shading", 5))
    model.trained = True
    return model, hist


@dataclass
class SrrBundle:
    model: SrrModel
    config: MebsConfig
    dataset_fingerprint: str = ""
    landscape_fingerprint: str = ""

    method = "srr"

    def policy(self):
        def run(req):
            return self.model.shade(req.features, req.unshaded_bid, req.upstream_pctr)[1]
        return run

    def infer(self, features, unshaded, pctr):
        t0 = time.perf_counter()
        b = self.model.shade(features, unshaded, pctr)[1]
        return b, {"model": time.perf_counter() - t0, "search": 0.0, "forward_passes": 1}

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        _save_net(d / "srr.json", self.model)
        _dump(d / "manifest.json", {
            "method": self.method, "config": self.config.to_dict(), "checkpoints": {"srr": "srr.json"},
            "dataset_fingerprint": self.dataset_fingerprint, "landscape_fingerprint": self.landscape_fingerprint,
        })

    @classmethod
    def load(cls, directory):
        man = _read_manifest(directory, cls.method)
        net, h = _load_ckpt(Path(directory) / "srr.json", None)
        m = SrrModel(net, Standardizer(**h["bid_enc"]), Standardizer(**h["pctr_enc"]), h["r_min"])
        m.trained = True
        return cls(m, MebsConfig.from_dict(man["config"]), man["dataset_fingerprint"], man["landscape_fingerprint"])


# -- TSBS ----------------------------------------------------------------------

def candidate_ratios(G: int, r_min: float = R_MIN) -> np.ndarray:
    if G < 2:
        raise ValueError("TSBS needs at least two candidates")
    return np.linspace(r_min, 1.0, G)


class WinPriceDistModel:
    """P(wp <= r_g mu0 V | x) at each candidate ratio r_g, one output per candidate."""

    kind = "win_price_dist"

    def __init__(self, net: DeepFM, bid_enc: Standardizer, pctr_enc: Standardizer, ratios: np.ndarray):
        self.net, self.bid_enc, self.pctr_enc = net, bid_enc, pctr_enc
        self.ratios = np.asarray(ratios, dtype=np.float64)
        self.trained = False

    def logits(self, tape, features, unshaded, pctr, trainable=False) -> ad.Node:
        num = np.stack([self.bid_enc(unshaded), self.pctr_enc(pctr)], axis=1)
        return self.net.forward(tape, features, num, trainable=trainable)

    def predict(self, features, unshaded, pctr) -> np.ndarray:
        return expit(np.asarray(self.logits(ad.Tape(), features, unshaded, pctr).value, dtype=np.float64))

    def hyper(self):
        return {"bid_enc": asdict(self.bid_enc), "pctr_enc": asdict(self.pctr_enc), "ratios": self.ratios.tolist()}


def train_win_price_dist(ds: Dataset, cfg: MebsConfig = None, G: int = 20):
    """Per-candidate cross-entropy against 1{r_g mu0 V >= wp} on every record."""
    cfg = cfg or MebsConfig()
    ratios = candidate_ratios(G, cfg.r_min)
    Y = (ratios[None, :] * ds.unshaded_bid[:, None] >= ds.wp[:, None]).astype(np.float64)
    if Y.min() == Y.max():
        raise TrainingError("win-price distribution training needs both winning and losing candidates")
    base = logit(np.clip(Y.mean(0), 1e-4, 1 - 1e-4))
    net = _net("tsbs_dist", _vocab(ds), ("unshaded_bid", "pctr"), cfg, out_dim=G, seed=cfg.seed * 10 + 6)
    net.params["b_out"][:] = base
    model = WinPriceDistModel(net, Standardizer.fit("log1p", ds.unshaded_bid),
                              Standardizer.fit("logit", ds.upstream_pctr), ratios)
    X, U, p = ds.features, ds.unshaded_bid, ds.upstream_pctr

    def batch_loss(tape, idx):
        return ad.mean(ad.bce_with_logits(model.logits(tape, X[idx], U[idx], p[idx], True), Y[idx]))

    hist = fit(net.trainable_params(), batch_loss, len(ds), cfg.stage("win_rate", 6))
    net.embedding.frozen = True
    model.trained = True
    return model, hist


class _DistAsWinRate:
    """Adapter so the shared calibration trainer can borrow the dist model's
    embedding and bid encoding."""

    kind = "win_price_dist"
    trained = True

    def __init__(self, dist: WinPriceDistModel):
        self.net, self.bid_enc = dist.net, dist.bid_enc


TIE_RTOL = 1e-12


def first_argmax(s: np.ndarray, rtol: float = TIE_RTOL) -> np.ndarray:
    """Row-wise index of the first entry within ``rtol`` (relative to the row
    maximum) of that maximum, so rounding noise on a flat plateau does not
    pick an arbitrary point."""
    s = np.asarray(s, dtype=np.float64)
    top = s.max(axis=1, keepdims=True)
    return np.argmax(s >= top - rtol * np.abs(top), axis=1)


def tsbs_search(unshaded, bids, win_prob, pctr_k, cost):
    """Grid argmax of (mu0 V - C(b)) P(x, b) pCTR_k(x, b); ties go to the
    lowest bid (candidates must be increasing along axis 1)."""
    u = np.asarray(unshaded, dtype=np.float64)[:, None]
    s = (u - cost) * win_prob * pctr_k
    j = first_argmax(s)
    return np.asarray(bids)[np.arange(len(j)), j], j, s


def infer_tsbs(dist: WinPriceDistModel, calib: CalibrationModel, features, unshaded, pctr, rcb, counter=None):
    """Two-step shading: predicted win probabilities at every candidate, one
    calibration pass per candidate, then an exhaustive search.

    ``rcb`` is either per-record cost-bid ratios or a callable mapping the
    (n, G) candidate bids to expected costs. Returns (bids, timing)."""
    U = np.asarray(unshaded, dtype=np.float64)
    t0 = time.perf_counter()
    P = dist.predict(features, U, pctr)
    bids = U[:, None] * dist.ratios[None, :]
    pk = np.empty_like(bids)
    for g in range(bids.shape[1]):
        pk[:, g] = calib.predict(features, bids[:, g], pctr)
    t1 = time.perf_counter()
    cost = rcb(bids) if callable(rcb) else np.asarray(rcb, dtype=np.float64).reshape(-1, 1) * bids
    b, _, _ = tsbs_search(U, bids, P, pk, cost)
    t2 = time.perf_counter()
    passes = 1 + bids.shape[1]
    if counter is not None:
        counter["forward_passes"] = counter.get("forward_passes", 0) + passes
    return b, {"model": t1 - t0, "search": t2 - t1, "forward_passes": passes}


@dataclass
class TsbsBundle:
    dist: WinPriceDistModel
    calibration: CalibrationModel
    rcb: CostBidRatio
    config: MebsConfig
    dataset_fingerprint: str = ""
    landscape_fingerprint: str = ""
    scene_col: int = 1

    method = "tsbs"

    @property
    def G(self):
        return len(self.dist.ratios)

    def infer(self, features, unshaded, pctr):
        r_cb = self.rcb.scene_ratio(np.asarray(features)[:, self.scene_col])
        return infer_tsbs(self.dist, self.calibration, features, unshaded, pctr, r_cb)

    def policy(self):
        def run(req):
            return self.infer(req.features, req.unshaded_bid, req.upstream_pctr)[0]
        return run

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        _save_net(d / "dist.json", self.dist)
        _save_net(d / "calibration.json", self.calibration)
        _dump(d / "manifest.json", {
            "method": self.method, "config": self.config.to_dict(), "r_cb": self.rcb.to_dict(),
            "checkpoints": {"dist": "dist.json", "calibration": "calibration.json"},
            "embedding_fingerprint": self.dist.net.embedding.fingerprint(), "scene_col": self.scene_col,
            "dataset_fingerprint": self.dataset_fingerprint, "landscape_fingerprint": self.landscape_fingerprint,
        })

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        man = _read_manifest(d, cls.method)
        net, h = _load_ckpt(d / "dist.json", None)
        dist = WinPriceDistModel(net, Standardizer(**h["bid_enc"]), Standardizer(**h["pctr_enc"]), h["ratios"])
        net, h = _load_ckpt(d / "calibration.json", dist.net.embedding)
        calib = CalibrationModel(net, Standardizer(**h["bid_enc"]))
        dist.trained = calib.trained = True
        return cls(dist, calib, CostBidRatio.from_dict(man["r_cb"]), MebsConfig.from_dict(man["config"]),
                   man["dataset_fingerprint"], man["landscape_fingerprint"], man["scene_col"])


def train_tsbs(ds: Dataset, cfg: MebsConfig = None, G: int = 20) -> TsbsBundle:
    cfg = cfg or MebsConfig()
    dist, _ = train_win_price_dist(ds, cfg, G)
    calib, _ = train_calibration(ds, _DistAsWinRate(dist), cfg)
    return TsbsBundle(dist, calib, estimate_cost_bid_ratio(ds, cfg.rcb_support), cfg, ds.fingerprint(),
                      ds.meta.landscape_fingerprint if ds.meta else "", ds.field_names.index("scene"))


# -- NPM -----------------------------------------------------------------------

NPM_STEP = 0.05


def npm_candidates(r_min: float = R_MIN, step: float = NPM_STEP) -> np.ndarray:
    n = int(round((1.0 - r_min) / step))
    return np.round(np.linspace(r_min, 1.0, n + 1), 10)


@dataclass
class NpmTable:
    fields: tuple
    field_cols: tuple
    ratios: dict            # bin key -> stored ratio
    support: dict           # bin key -> winnable count
    default_ratio: float
    min_support: int = 50
    candidates: list = field(default_factory=list)
    landscape_fingerprint: str = ""

    method = "npm"

    @staticmethod
    def key(row) -> str:
        return ",".join(str(int(v)) for v in row)

    def ratio_for(self, features) -> np.ndarray:
        sel = np.asarray(features)[:, list(self.field_cols)]
        return np.array([self.ratios.get(self.key(r), self.default_ratio) for r in sel])

    def policy(self):
        def run(req):
            return self.ratio_for(req.features) * req.unshaded_bid
        return run

    def infer(self, features, unshaded, pctr):
        t0 = time.perf_counter()
        b = self.ratio_for(features) * np.asarray(unshaded)
        return b, {"model": time.perf_counter() - t0, "search": 0.0, "forward_passes": 0}

    def to_dict(self):
        return {
            "method": self.method, "fields": list(self.fields), "field_cols": list(self.field_cols),
            "bins": {k: {"ratio": self.ratios.get(k), "support": self.support[k]} for k in sorted(self.support)},
            "default_ratio": self.default_ratio, "min_support": self.min_support, "candidates": self.candidates,
        }

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        _dump(d / "npm.json", self.to_dict())
        _dump(d / "manifest.json", {"method": self.method, "table": "npm.json",
                                    "landscape_fingerprint": self.landscape_fingerprint})

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        man = _read_manifest(d, cls.method)
        with open(d / "npm.json") as fh:
            t = json.load(fh)
        bins = t["bins"]
        return cls(tuple(t["fields"]), tuple(t["field_cols"]),
                   {k: v["ratio"] for k, v in bins.items() if v["ratio"] is not None},
                   {k: v["support"] for k, v in bins.items()}, t["default_ratio"], t["min_support"], t["candidates"],
                   man.get("landscape_fingerprint", ""))


def npm_counterfactual_surplus(ds: Dataset, candidates, slot_table, rcb: CostBidRatio) -> np.ndarray:
    """(n, C) realized surplus had each record bid r_c mu0 V.

    The logged minimum winning price decides the win. The slot is the logged
    one when the counterfactual bid is at least the logged bid, otherwise the
    scene's last slot; cost is r_cb(scene) b. Slot factors come from
    ``slot_table`` relative to the record's original (unshaded) slot."""
    U = ds.unshaded_bid[:, None]
    b = U * np.asarray(candidates)[None, :]
    won = b >= ds.wp[:, None]
    scene = ds.scene_id
    K = slot_table.k_of(scene)[:, None]
    logged_ok = ds.won[:, None] & (b >= ds.shaded_bid[:, None])
    slot = np.where(logged_ok, ds.slot_won[:, None], K)
    orig = np.where(ds.original_slot > 0, ds.original_slot, K[:, 0])
    u_new = slot_table.factor(np.broadcast_to(scene[:, None], slot.shape), slot)
    u_orig = slot_table.factor(scene, orig)[:, None]
    cost = rcb.scene_ratio(scene)[:, None] * b
    return (U - cost) * won * (u_new / u_orig) * ds.upstream_pctr[:, None]


def train_npm(ds: Dataset, slot_table, binning_fields: Sequence[str] = ("scene", "ad_bucket"), support: int = 50,
              r_min: float = R_MIN, step: float = NPM_STEP, rcb: Optional[CostBidRatio] = None) -> NpmTable:
    """Per bin, the candidate ratio with the largest summed counterfactual
    surplus over winnable records; bins under ``support`` use the global best."""
    sub = ds.subset(ds.winnable)
    if len(sub) == 0:
        raise TrainingError("NPM training needs winnable records")
    cand = npm_candidates(r_min, step)
    rcb = rcb or estimate_cost_bid_ratio(ds)
    S = npm_counterfactual_surplus(sub, cand, slot_table, rcb)
    cols = tuple(ds.field_names.index(f) for f in binning_fields)
    keys, inv = np.unique(sub.features[:, list(cols)], axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    tot = np.zeros((len(keys), len(cand)))
    np.add.at(tot, inv, S)
    cnt = np.bincount(inv, minlength=len(keys))
    default = float(cand[np.argmax(S.sum(0))])
    ratios, sup = {}, {}
    for i, k in enumerate(keys):
        key = NpmTable.key(k)
        sup[key] = int(cnt[i])
        if cnt[i] >= support:
            ratios[key] = float(cand[np.argmax(tot[i])])
    return NpmTable(tuple(binning_fields), cols, ratios, sup, default, support, cand.tolist(),
                    ds.meta.landscape_fingerprint if ds.meta else "")


# -- ground-truth oracle -----------------------------------------------------------

def oracle_grid(resolution: int = 400) -> np.ndarray:
    return np.arange(1, resolution + 1) / resolution


def oracle_optimal_bid(landscape: LandscapeSpec, features, unshaded, resolution: int = 400,
                       grid: Optional[np.ndarray] = None, return_curves: bool = False):
    """Exhaustive search of the true expected surplus over bids ``ratio *
    mu0 V`` for ``ratio`` in ``grid`` (default resolution steps over (0, 1])."""
    ratios = oracle_grid(resolution) if grid is None else np.asarray(grid, dtype=np.float64)
    U = np.asarray(unshaded, dtype=np.float64)
    tc = truth_curves(landscape, features, U, ratios)
    s = tc.surplus(U)
    j = first_argmax(s)
    b = tc.bids[np.arange(len(j)), j]
    return (b, tc, s) if return_curves else b


def truth_tsbs(tc: TruthCurves, unshaded):
    """TSBS search fed with the ground-truth factors on the curves' grid."""
    b, _, _ = tsbs_search(unshaded, tc.bids, tc.win_prob, tc.pctr_slot, tc.cost)
    return b
