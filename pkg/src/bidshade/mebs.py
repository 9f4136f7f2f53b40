"""Multi-task end-to-end bid shading: win-rate, bid-aware calibration and
shading-ratio models trained in that order over one shared embedding."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit, logit

from .auction_sim.dataset import Dataset
from .errors import DataError, DomainError, TrainingError, UsageError
from .model_core import autodiff as ad
from .model_core.checkpoint import model_from_dict, model_to_dict
from .model_core.deepfm import DeepFM, EmbeddingTable, NetSpec
from .model_core.training import TrainConfig, TrainHistory, fit

log = logging.getLogger(__name__)

R_MIN = 0.1
EPS = 1e-8


# -- input encoding ----------------------------------------------------------

@dataclass
class Standardizer:
    """Affine map ``(g(x) - mean) / std`` with ``g`` = log1p for bids and
    logit for probabilities. Fitted on training data, stored in checkpoints."""

    kind: str  # "log1p" | "logit"
    mean: float = 0.0
    std: float = 1.0

    def _g(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.log1p(x) if self.kind == "log1p" else logit(x)

    @classmethod
    def fit(cls, kind, x):
        s = cls(kind)
        g = s._g(x)
        s.mean, s.std = float(np.mean(g)), float(np.std(g)) or 1.0
        return s

    def __call__(self, x) -> np.ndarray:
        return (self._g(x) - self.mean) / self.std

    def node(self, x: ad.Node) -> ad.Node:
        """Differentiable version (log1p only; probabilities enter as data)."""
        if self.kind != "log1p":
            raise UsageError("only bid encodings are differentiable")
        return (ad.log1p(x) - self.mean) * (1.0 / self.std)


def _column(x: ad.Node) -> ad.Node:
    return ad.reshape(x, (x.shape[0], 1))


def _net(name, vocab, numeric, cfg, out_dim=1, embedding=None, seed=0, init_bias=0.0):
    spec = NetSpec(name, tuple(vocab), tuple(numeric), cfg.embed_dim, tuple(cfg.hidden), out_dim, cfg.dtype)
    return DeepFM(spec, embedding=embedding, seed=seed, init_bias=init_bias)


# -- models ------------------------------------------------------------------

class WinRateModel:
    """P(x, b): probability that bid b reaches the minimum winning price."""

    kind = "win_rate"

    def __init__(self, net: DeepFM, bid_enc: Standardizer):
        self.net, self.bid_enc = net, bid_enc
        self.trained = False

    def logits(self, tape, features, bid, trainable=False) -> ad.Node:
        b = bid if isinstance(bid, ad.Node) else tape.const(np.asarray(bid, dtype=np.float64))
        return self.net.forward(tape, features, _column(self.bid_enc.node(b)), trainable=trainable)

    def prob(self, tape, features, bid, trainable=False) -> ad.Node:
        return ad.sigmoid(self.logits(tape, features, bid, trainable))

    def predict(self, features, bid) -> np.ndarray:
        return expit(np.asarray(self.logits(ad.Tape(), features, bid).value, dtype=np.float64))

    def hyper(self):
        return {"bid_enc": asdict(self.bid_enc)}


class CalibrationModel:
    """Bid-aware calibration: pCTR_k(x, b) = sigmoid(f(x, b) + logit(pCTR(x)))."""

    kind = "calibration"

    def __init__(self, net: DeepFM, bid_enc: Standardizer):
        self.net, self.bid_enc = net, bid_enc
        self.trained = False

    def factor(self, tape, features, bid, trainable=False) -> ad.Node:
        b = bid if isinstance(bid, ad.Node) else tape.const(np.asarray(bid, dtype=np.float64))
        return self.net.forward(tape, features, _column(self.bid_enc.node(b)), trainable=trainable)

    def prob(self, tape, features, bid, upstream_pctr, trainable=False) -> ad.Node:
        z0 = _checked_logit(upstream_pctr)
        return ad.sigmoid(self.factor(tape, features, bid, trainable) + z0)

    def predict_factor(self, features, bid) -> np.ndarray:
        return np.asarray(self.factor(ad.Tape(), features, bid).value, dtype=np.float64)

    def predict(self, features, bid, upstream_pctr) -> np.ndarray:
        return calibrated_pctr(self.predict_factor(features, bid), upstream_pctr)

    def hyper(self):
        return {"bid_enc": asdict(self.bid_enc)}


def _checked_logit(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(~(p > 0) | ~(p < 1)):
        raise DomainError("upstream pCTR must lie strictly inside (0, 1)")
    return logit(p)


_TINY = np.finfo(np.float64).tiny
_EPS64 = np.finfo(np.float64).epsneg


def calibrated_pctr(f, upstream_pctr) -> np.ndarray:
    """sigmoid(f + logit(p)); f = 0 returns p unchanged."""
    p = np.asarray(upstream_pctr, dtype=np.float64)
    z0 = _checked_logit(p)
    f = np.asarray(f, dtype=np.float64)
    out = np.clip(expit(f + z0), _TINY, 1.0 - _EPS64)
    return np.where(f == 0, p, out)


class ShadingModel:
    """Shading ratio r(x, mu0 V) in [r_min, 1] from one forward pass."""

    kind = "shading"

    def __init__(self, net: DeepFM, bid_enc: Standardizer, pctr_enc: Standardizer, r_min: float = R_MIN):
        self.net, self.bid_enc, self.pctr_enc, self.r_min = net, bid_enc, pctr_enc, float(r_min)
        self.trained = False

    def _numeric(self, unshaded, pctr):
        return np.stack([self.bid_enc(unshaded), self.pctr_enc(pctr)], axis=1)

    def ratio(self, tape, features, unshaded, pctr, trainable=False) -> ad.Node:
        z = self.net.forward(tape, features, self._numeric(unshaded, pctr), trainable=trainable)
        return ad.sigmoid(z) * (1.0 - self.r_min) + self.r_min

    def shade(self, features, unshaded_bid, upstream_pctr):
        """Returns (ratio, shaded bid)."""
        u = np.asarray(unshaded_bid, dtype=np.float64)
        if np.any(~(u > 0)):
            raise DomainError("unshaded bid must be positive")
        r = np.asarray(self.ratio(ad.Tape(), features, u, upstream_pctr).value, dtype=np.float64)
        r = np.clip(r, self.r_min, 1.0)
        return r, r * u

    def hyper(self):
        return {"bid_enc": asdict(self.bid_enc), "pctr_enc": asdict(self.pctr_enc), "r_min": self.r_min}


def predict_win_rate(model: WinRateModel, features, bid) -> np.ndarray:
    return model.predict(features, bid)


def shade(model: ShadingModel, features, unshaded_bid, upstream_pctr):
    return model.shade(features, unshaded_bid, upstream_pctr)


# -- cost-bid ratio ----------------------------------------------------------

@dataclass
class CostBidRatio:
    """Mean cost/bid on won auctions per (scene, slot) and per scene, with a
    global fallback for cells below ``support`` samples."""

    cell: np.ndarray          # (n_scenes, k_max) means, NaN when unsupported
    cell_count: np.ndarray
    scene: np.ndarray         # (n_scenes,) slot-marginal means, NaN when unsupported
    scene_count: np.ndarray
    global_ratio: float
    support: int = 50

    @classmethod
    def constant(cls, value: float, n_scenes: int = 1, k_max: int = 1) -> "CostBidRatio":
        """Uniform table; value 1.0 gives first-price costs C(b) = b."""
        return cls(np.full((n_scenes, k_max), value), np.zeros((n_scenes, k_max), int),
                   np.full(n_scenes, value), np.zeros(n_scenes, int), float(value), 0)

    def lookup(self, scene, slot) -> np.ndarray:
        scene, slot = np.asarray(scene), np.asarray(slot)
        ok = (scene < self.cell.shape[0]) & (slot >= 1) & (slot <= self.cell.shape[1])
        s, k = np.where(ok, scene, 0), np.where(ok, slot - 1, 0)
        v = self.cell[s, k]
        return np.where(ok & np.isfinite(v), v, self.global_ratio)

    def scene_ratio(self, scene) -> np.ndarray:
        scene = np.asarray(scene)
        ok = scene < len(self.scene)
        v = self.scene[np.where(ok, scene, 0)]
        return np.where(ok & np.isfinite(v), v, self.global_ratio)

    def to_dict(self):
        def arr(a):
            return [[None if not np.isfinite(v) else float(v) for v in row] for row in np.atleast_2d(a)]
        return {
            "cell": arr(self.cell), "cell_count": self.cell_count.tolist(),
            "scene": arr(self.scene)[0], "scene_count": self.scene_count.tolist(),
            "global": self.global_ratio, "support": self.support,
        }

    @classmethod
    def from_dict(cls, d):
        def arr(a):
            return np.array([[np.nan if v is None else v for v in row] for row in a], dtype=np.float64)
        return cls(arr(d["cell"]), np.array(d["cell_count"], dtype=int), arr([d["scene"]])[0],
                   np.array(d["scene_count"], dtype=int), float(d["global"]), int(d["support"]))


def estimate_cost_bid_ratio(ds: Dataset, support: int = 50, n_scenes: Optional[int] = None,
                            k_max: Optional[int] = None) -> CostBidRatio:
    won = ds.won.astype(bool)
    if not won.any():
        raise DataError("cost-bid ratio needs at least one won record")
    scene = ds.scene_id[won]
    slot = ds.slot_won[won]
    ratio = ds.cost[won] / ds.shaded_bid[won]
    S = int(n_scenes if n_scenes is not None else scene.max() + 1)
    K = int(k_max if k_max is not None else slot.max())
    tot, cnt = np.zeros((S, K)), np.zeros((S, K), dtype=int)
    np.add.at(tot, (scene, slot - 1), ratio)
    np.add.at(cnt, (scene, slot - 1), 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cell = np.where(cnt >= support, tot / cnt, np.nan)
        s_tot, s_cnt = tot.sum(1), cnt.sum(1)
        sc = np.where(s_cnt >= support, s_tot / s_cnt, np.nan)
    return CostBidRatio(cell, cnt, sc, s_cnt, float(ratio.mean()), support)


# -- expected surplus ----------------------------------------------------------

@dataclass
class SurplusTerm:
    margin: ad.Node   # mu0 V - r_cb b
    P: ad.Node
    pctr_k: ad.Node
    es: ad.Node

    def numpy(self) -> dict:
        return {k: np.asarray(getattr(self, k).value, dtype=np.float64) for k in ("margin", "P", "pctr_k", "es")}


def expected_surplus(tape, wr: WinRateModel, calib: Optional[CalibrationModel], features, bid: ad.Node,
                     unshaded, upstream_pctr, rcb) -> SurplusTerm:
    """(mu0 V - r_cb b) P(x, b) pCTR_k(x, b) with every factor kept. Without a
    calibration model pCTR_k is the upstream pCTR."""
    margin = tape.const(np.asarray(unshaded, dtype=np.float64)) - bid * np.asarray(rcb, dtype=np.float64)
    P = ad.cast(wr.prob(tape, features, bid), np.float64)
    if calib is None:
        pk = tape.const(np.asarray(upstream_pctr, dtype=np.float64))
    else:
        pk = ad.cast(calib.prob(tape, features, bid, upstream_pctr), np.float64)
    return SurplusTerm(margin, P, pk, margin * P * pk)


def surplus_loss(es: ad.Node, eps: float = EPS) -> ad.Node:
    """-mean(E(S) / stop_grad(max(E(S), eps))). Value is -1 when every E(S)
    exceeds eps; each sample's gradient is that of -log E(S)."""
    d = np.where(es.value > eps, es.value, eps)
    return -ad.mean(es / tape_const(es, d))


def tape_const(like: ad.Node, value) -> ad.Node:
    return like.tape.const(np.asarray(value))


# -- configuration -------------------------------------------------------------

def _stage(**kw):
    return field(default_factory=lambda: TrainConfig(**kw))


@dataclass
class MebsConfig:
    embed_dim: int = 8
    hidden: tuple = (64, 32, 16)
    dtype: str = "float32"
    r_min: float = R_MIN
    eps: float = EPS
    rcb_support: int = 50
    share_embedding: bool = True
    shading_loss: str = "surplus"  # "surplus" | "mse"
    calibrated: bool = True
    seed: int = 0
    win_rate: TrainConfig = _stage(lr=3e-3, batch_size=2048, epochs=12, patience=3)
    calibration: TrainConfig = _stage(lr=1e-3, batch_size=1024, epochs=40, patience=5)
    shading: TrainConfig = _stage(lr=3e-3, batch_size=1024, epochs=30, patience=5)

    def stage(self, name: str, offset: int) -> TrainConfig:
        return replace(getattr(self, name), seed=self.seed * 1000 + offset)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("win_rate", "calibration", "shading"):
            if k in d and isinstance(d[k], dict):
                d[k] = TrainConfig(**d[k])
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


# -- training ----------------------------------------------------------------

def _vocab(ds: Dataset):
    if ds.meta is None or not ds.meta.vocab:
        raise DataError("dataset metadata lacks the categorical vocabulary")
    return tuple(ds.meta.vocab)


def train_win_rate(ds: Dataset, cfg: MebsConfig = None, bid_enc: Standardizer = None):
    """Binary cross-entropy of P(x, b_logged) against the win label, on every record."""
    cfg = cfg or MebsConfig()
    y = ds.won.astype(np.float64)
    if len(y) == 0 or y.min() == y.max():
        raise TrainingError("win-rate training needs both won and lost records")
    bid_enc = bid_enc or Standardizer.fit("log1p", ds.unshaded_bid)
    base = float(np.clip(y.mean(), 1e-4, 1 - 1e-4))
    net = _net("win_rate", _vocab(ds), ("bid",), cfg, seed=cfg.seed * 10 + 1, init_bias=float(logit(base)))
    model = WinRateModel(net, bid_enc)
    X, b = ds.features, ds.shaded_bid

    def batch_loss(tape, idx):
        z = model.logits(tape, X[idx], b[idx], trainable=True)
        return ad.mean(ad.bce_with_logits(z, y[idx]))

    hist = fit(net.trainable_params(), batch_loss, len(y), cfg.stage("win_rate", 1))
    _check_history(hist, "win_rate")
    net.embedding.frozen = True
    model.trained = True
    return model, hist


def _require_trained(*models):
    for m in models:
        if m is not None and not m.trained:
            raise UsageError(f"{m.kind} model must be trained before it is used downstream")


def _embedding_for(wr: WinRateModel, cfg: MebsConfig, vocab, seed):
    if cfg.share_embedding:
        return wr.net.embedding
    rng = np.random.default_rng([seed, 104729])
    return EmbeddingTable(vocab, cfg.embed_dim, rng, np.dtype(cfg.dtype))


def train_calibration(ds: Dataset, wr: WinRateModel, cfg: MebsConfig = None):
    """Cross-entropy of sigmoid(f(x, b) + logit(pCTR(x))) against clicks.

    Click labels exist only where the logged bid won, so the rows used are
    the won records (all of which are winnable)."""
    cfg = cfg or MebsConfig()
    _require_trained(wr)
    if not ds.winnable.any():
        raise TrainingError("calibration training needs winnable records")
    sub = ds.subset(ds.won.astype(bool))
    if len(sub) == 0:
        raise TrainingError("calibration training needs won records")
    emb = _embedding_for(wr, cfg, _vocab(ds), cfg.seed * 10 + 2)
    # f starts at exactly 0, i.e. the upstream pCTR unchanged
    net = _net("calibration", _vocab(ds), ("bid",), cfg, embedding=emb, seed=cfg.seed * 10 + 2).zero_output()
    if not cfg.share_embedding:
        net.owns_embedding = True
    model = CalibrationModel(net, wr.bid_enc)
    X, b, y = sub.features, sub.shaded_bid, sub.clicked.astype(np.float64)
    z0 = _checked_logit(sub.upstream_pctr)

    def batch_loss(tape, idx):
        f = model.factor(tape, X[idx], b[idx], trainable=True)
        return ad.mean(ad.bce_with_logits(ad.cast(f, np.float64) + z0[idx], y[idx]))

    hist = fit(net.trainable_params(), batch_loss, len(sub), cfg.stage("calibration", 2))
    _check_history(hist, "calibration")
    net.embedding.frozen = True
    model.trained = True
    return model, hist


def shading_targets(ds: Dataset, r_min: float = R_MIN) -> np.ndarray:
    """Minimum-winning-price ratio clip(wp / mu0 V, r_min, 1)."""
    return np.clip(ds.wp / ds.unshaded_bid, r_min, 1.0)


def train_shading(ds: Dataset, wr: WinRateModel, calib: Optional[CalibrationModel], rcb: CostBidRatio,
                  cfg: MebsConfig = None):
    """Fit r(x, mu0 V) on winnable records by minimizing the normalized
    negative expected surplus (or, with ``shading_loss="mse"``, the squared
    error to the minimum-winning-price ratio)."""
    cfg = cfg or MebsConfig()
    _require_trained(wr, calib)
    if cfg.calibrated and calib is None:
        raise UsageError("calibrated shading needs a calibration model")
    sub = ds.subset(ds.winnable)
    if len(sub) == 0:
        raise TrainingError("shading training needs winnable records")
    vocab = _vocab(ds)
    emb = _embedding_for(wr, cfg, vocab, cfg.seed * 10 + 3)
    pctr_enc = Standardizer.fit("logit", ds.upstream_pctr)
    init = float(logit((0.85 - cfg.r_min) / (1 - cfg.r_min)))
    net = _net("shading", vocab, ("unshaded_bid", "pctr"), cfg, embedding=emb, seed=cfg.seed * 10 + 3,
               init_bias=init)
    if not cfg.share_embedding:
        net.owns_embedding = True
    model = ShadingModel(net, wr.bid_enc, pctr_enc, cfg.r_min)
    X, U, p = sub.features, sub.unshaded_bid, sub.upstream_pctr
    r_cb = rcb.scene_ratio(sub.scene_id)
    use_calib = calib if cfg.calibrated else None
    target = shading_targets(sub, cfg.r_min)

    def surplus_term(tape, idx, trainable):
        r = ad.cast(model.ratio(tape, X[idx], U[idx], p[idx], trainable), np.float64)
        return expected_surplus(tape, wr, use_calib, X[idx], r * U[idx], U[idx], p[idx], r_cb[idx])

    if cfg.shading_loss == "surplus":
        def batch_loss(tape, idx):
            return surplus_loss(surplus_term(tape, idx, True).es, cfg.eps)
    elif cfg.shading_loss == "mse":
        def batch_loss(tape, idx):
            r = ad.cast(model.ratio(tape, X[idx], U[idx], p[idx], True), np.float64)
            return ad.mean(ad.square(r - target[idx]))
    else:
        raise UsageError(f"unknown shading loss '{cfg.shading_loss}'")

    def val_metric(idx):
        if cfg.shading_loss == "mse":
            return float(batch_loss(ad.Tape(), idx).value)
        return -float(np.mean(surplus_term(ad.Tape(), idx, False).es.value))

    hist = fit(net.trainable_params(), batch_loss, len(sub), cfg.stage("shading", 3), val_metric=val_metric)
    _check_history(hist, "shading")
    model.trained = True
    return model, hist


def _check_history(hist: TrainHistory, name: str):
    vals = [hist.initial_val] + hist.val
    if not all(np.isfinite(vals)):
        raise TrainingError(f"{name} training diverged (non-finite validation loss)")


# -- bundle ------------------------------------------------------------------

@dataclass
class MebsBundle:
    win_rate: WinRateModel
    calibration: Optional[CalibrationModel]
    shading: ShadingModel
    rcb: CostBidRatio
    config: MebsConfig
    dataset_fingerprint: str = ""
    landscape_fingerprint: str = ""
    histories: dict = field(default_factory=dict)

    method = "mebs"

    def policy(self):
        def run(req):
            return self.shading.shade(req.features, req.unshaded_bid, req.upstream_pctr)[1]
        return run

    def infer(self, features, unshaded, pctr):
        t0 = time.perf_counter()
        b = self.shading.shade(features, unshaded, pctr)[1]
        return b, {"model": time.perf_counter() - t0, "search": 0.0, "forward_passes": 1}

    def manifest(self) -> dict:
        return {
            "method": self.method,
            "config": self.config.to_dict(),
            "dataset_fingerprint": self.dataset_fingerprint,
            "landscape_fingerprint": self.landscape_fingerprint,
            "embedding_fingerprint": self.win_rate.net.embedding.fingerprint(),
            "r_cb": self.rcb.to_dict(),
            "checkpoints": {"win_rate": "win_rate.json", "shading": "shading.json",
                            **({"calibration": "calibration.json"} if self.calibration else {})},
            "histories": self.histories,
        }

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        models = {"win_rate": self.win_rate, "calibration": self.calibration, "shading": self.shading}
        for name, m in models.items():
            if m is None:
                continue
            with open(d / f"{name}.json", "w") as fh:
                json.dump(model_to_dict(m.net, m.kind, m.hyper()), fh, sort_keys=True)
        with open(d / "manifest.json", "w") as fh:
            json.dump(self.manifest(), fh, sort_keys=True, indent=1)


def _load_ckpt(path: Path, shared: Optional[EmbeddingTable]):
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with open(path) as fh:
        d = json.load(fh)
    net, kind, hyper = model_from_dict(d, None if d["embedding"]["owned"] else shared)
    return net, hyper


def load_bundle(directory) -> MebsBundle:
    d = Path(directory)
    mp = d / "manifest.json"
    if not mp.exists():
        raise DataError(f"bundle manifest not found in {d}")
    with open(mp) as fh:
        man = json.load(fh)
    if man.get("method") != "mebs":
        raise DataError(f"{d} holds a '{man.get('method')}' bundle, not mebs")
    net, hyper = _load_ckpt(d / "win_rate.json", None)
    wr = WinRateModel(net, Standardizer(**hyper["bid_enc"]))
    calib = None
    if "calibration" in man["checkpoints"]:
        net, hyper = _load_ckpt(d / "calibration.json", wr.net.embedding)
        calib = CalibrationModel(net, Standardizer(**hyper["bid_enc"]))
    net, hyper = _load_ckpt(d / "shading.json", wr.net.embedding)
    sh = ShadingModel(net, Standardizer(**hyper["bid_enc"]), Standardizer(**hyper["pctr_enc"]), hyper["r_min"])
    for m in (wr, calib, sh):
        if m is not None:
            m.trained = True
    return MebsBundle(wr, calib, sh, CostBidRatio.from_dict(man["r_cb"]), MebsConfig.from_dict(man["config"]),
                      man["dataset_fingerprint"], man["landscape_fingerprint"], man.get("histories", {}))


def train_mebs(ds: Dataset, cfg: MebsConfig = None, landscape_fingerprint: str = "") -> MebsBundle:
    """Win rate, then calibration, then shading; the embedding is frozen after
    the first stage."""
    cfg = cfg or MebsConfig()
    wr, h1 = train_win_rate(ds, cfg)
    calib, h2 = (train_calibration(ds, wr, cfg) if cfg.calibrated else (None, None))
    rcb = estimate_cost_bid_ratio(ds, cfg.rcb_support)
    sh, h3 = train_shading(ds, wr, calib, rcb, cfg)
    hist = {k: asdict(h) for k, h in (("win_rate", h1), ("calibration", h2), ("shading", h3)) if h is not None}
    return MebsBundle(wr, calib, sh, rcb, cfg, ds.fingerprint(), landscape_fingerprint or
                      (ds.meta.landscape_fingerprint if ds.meta else ""), hist)
