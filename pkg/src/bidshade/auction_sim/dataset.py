"""Auction sampling, bid-log datasets and their JSON-lines format."""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np

from ..errors import DataError, FingerprintMismatch
from .landscape import LandscapeSpec
from .mechanism import AuctionOutcome, resolve_auctions, to_milli

CHUNK = 8192

RECORD_FIELDS = (
    "auction_id", "features", "scene_id", "value", "mu0", "unshaded_bid", "shaded_bid",
    "upstream_pctr", "won", "slot_won", "cost", "wp", "original_slot", "clicked",
)


@dataclass
class BidRequest:
    """What a bidding policy sees for a batch of auctions."""

    features: np.ndarray
    unshaded_bid: np.ndarray
    upstream_pctr: np.ndarray
    noise: np.ndarray  # per-auction U(0,1), lets stochastic policies stay seeded

    def __len__(self):
        return len(self.unshaded_bid)


Policy = Callable[[BidRequest], np.ndarray]


@dataclass
class AuctionBatch:
    """Sampled auctions including the hidden ground truth needed to resolve
    any bid against them (competitor bids, click propensity, click draws)."""

    features: np.ndarray
    value: np.ndarray
    upstream_pctr: np.ndarray
    competitors: np.ndarray  # (n, M_max) sorted descending, zero padded
    n_competitors: np.ndarray
    K: np.ndarray
    q: np.ndarray
    click_u: np.ndarray
    policy_noise: np.ndarray
    seed: int
    offset: int = 0

    def __len__(self):
        return len(self.value)

    def request(self, mu0) -> BidRequest:
        return BidRequest(self.features, to_milli(mu0 * self.value), self.upstream_pctr, self.policy_noise)

    def take(self, idx) -> "AuctionBatch":
        return AuctionBatch(
            self.features[idx], self.value[idx], self.upstream_pctr[idx], self.competitors[idx],
            self.n_competitors[idx], self.K[idx], self.q[idx], self.click_u[idx], self.policy_noise[idx],
            self.seed, self.offset,
        )


def _sample_chunk(landscape: LandscapeSpec, seed: int, chunk: int, n: int) -> AuctionBatch:
    rng = np.random.default_rng([seed, chunk])
    vocab = landscape.vocab
    features = np.stack([rng.integers(0, vocab[f], n) for f in landscape.field_names], axis=1)
    loc, scale, M, K = landscape.competitor_params(features)
    m_max = landscape.m_max
    z = rng.standard_normal((n, m_max))
    comp = to_milli(np.exp(loc[:, None] + scale[:, None] * z))
    comp = np.maximum(comp, 1.0 / 1000)
    comp[np.arange(m_max)[None, :] >= M[:, None]] = 0.0
    comp = -np.sort(-comp, axis=1)
    value = to_milli(np.exp(landscape.value_loc(features) + landscape.value_scale * rng.standard_normal(n)))
    value = np.maximum(value, 1.0 / 1000)
    q = landscape.click_propensity(features)
    u = landscape.slot_factor_matrix()
    u_ref = u[landscape.scene_of(features), landscape.reference_slot - 1]
    s = landscape.pctr_noise
    noise = np.exp(s * rng.standard_normal(n) - 0.5 * s * s)
    pctr = np.clip(q * u_ref * noise, 1e-6, 1 - 1e-6)
    return AuctionBatch(
        features=features.astype(np.int64), value=value, upstream_pctr=pctr, competitors=comp,
        n_competitors=M, K=K, q=q, click_u=rng.random(n), policy_noise=rng.random(n), seed=seed,
    )


def sample_auctions(landscape: LandscapeSpec, n: int, seed: int, threads: int = 1) -> AuctionBatch:
    """Sample ``n`` auctions. Chunk ``c`` always uses RNG stream (seed, c), so
    the result does not depend on the thread count."""
    if n < 1:
        raise DataError("n_auctions must be >= 1")
    sizes = [min(CHUNK, n - start) for start in range(0, n, CHUNK)]
    jobs = [(landscape, seed, c, sz) for c, sz in enumerate(sizes)]
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(lambda a: _sample_chunk(*a), jobs))
    else:
        parts = [_sample_chunk(*a) for a in jobs]
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
    return AuctionBatch(
        features=cat("features"), value=cat("value"), upstream_pctr=cat("upstream_pctr"),
        competitors=cat("competitors"), n_competitors=cat("n_competitors"), K=cat("K"), q=cat("q"),
        click_u=cat("click_u"), policy_noise=cat("policy_noise"), seed=seed,
    )


def simulate_click(slot_won: int, x, landscape: LandscapeSpec, rng: np.random.Generator) -> bool:
    """Bernoulli click with probability q(x) * u_slot for a single won auction."""
    x = np.atleast_2d(np.asarray(x, dtype=np.int64))
    s = int(landscape.scene_of(x)[0])
    p = landscape.profiles[s]
    if not 1 <= slot_won <= p.K:
        raise DataError(f"slot {slot_won} outside 1..{p.K}")
    q = float(landscape.click_propensity(x)[0])
    return bool(rng.random() < q * p.u[slot_won - 1])


@dataclass
class DatasetMeta:
    N: int
    N_plus: int
    N_won: int
    N_clicked: int
    seed: int
    n_rejected: int = 0
    landscape_fingerprint: str = ""
    field_names: tuple = ()
    vocab: tuple = ()

    def __post_init__(self):
        if not self.N >= self.N_plus >= self.N_won >= self.N_clicked >= 0:
            raise DataError(f"inconsistent dataset counts {self}")


@dataclass
class AuctionRecord:
    auction_id: int
    features: dict
    scene_id: int
    value: float
    mu0: float
    unshaded_bid: float
    shaded_bid: float
    upstream_pctr: float
    outcome: AuctionOutcome
    original_slot: Optional[int]
    clicked: bool

    @property
    def y_wr(self) -> bool:
        return self.outcome.won

    def to_json_dict(self) -> dict:
        o = self.outcome
        return {
            "auction_id": self.auction_id, "features": self.features, "scene_id": self.scene_id,
            "value": self.value, "mu0": self.mu0, "unshaded_bid": self.unshaded_bid,
            "shaded_bid": self.shaded_bid, "upstream_pctr": self.upstream_pctr, "won": o.won,
            "slot_won": o.slot_won, "cost": o.cost, "wp": o.wp, "original_slot": self.original_slot,
            "clicked": self.clicked,
        }


@dataclass
class Dataset:
    """Columnar bid log. Slot columns use 0 for "none" and cost is NaN for
    lost auctions; the record view converts these to ``None``."""

    auction_id: np.ndarray
    features: np.ndarray
    value: np.ndarray
    mu0: np.ndarray
    unshaded_bid: np.ndarray
    shaded_bid: np.ndarray
    upstream_pctr: np.ndarray
    won: np.ndarray
    slot_won: np.ndarray
    cost: np.ndarray
    wp: np.ndarray
    original_slot: np.ndarray
    clicked: np.ndarray
    meta: DatasetMeta
    field_names: tuple = field(default=())

    def __len__(self):
        return len(self.auction_id)

    @property
    def scene_id(self) -> np.ndarray:
        return self.features[:, self.field_names.index("scene")]

    @property
    def winnable(self) -> np.ndarray:
        return self.unshaded_bid >= self.wp

    def subset(self, mask_or_idx) -> "Dataset":
        cols = {k: getattr(self, k)[mask_or_idx] for k in _COLUMNS}
        return Dataset(**cols, meta=self.meta, field_names=self.field_names)

    def request(self) -> BidRequest:
        return BidRequest(self.features, self.unshaded_bid, self.upstream_pctr, np.zeros(len(self)))

    def record(self, i: int) -> AuctionRecord:
        won = bool(self.won[i])
        outcome = AuctionOutcome(
            won=won,
            slot_won=int(self.slot_won[i]) if won else None,
            cost=float(self.cost[i]) if won else None,
            wp=float(self.wp[i]),
        )
        return AuctionRecord(
            auction_id=int(self.auction_id[i]),
            features={n: int(v) for n, v in zip(self.field_names, self.features[i])},
            scene_id=int(self.scene_id[i]),
            value=float(self.value[i]),
            mu0=float(self.mu0[i]),
            unshaded_bid=float(self.unshaded_bid[i]),
            shaded_bid=float(self.shaded_bid[i]),
            upstream_pctr=float(self.upstream_pctr[i]),
            outcome=outcome,
            original_slot=int(self.original_slot[i]) or None,
            clicked=bool(self.clicked[i]),
        )

    def records(self) -> Iterator[AuctionRecord]:
        for i in range(len(self)):
            yield self.record(i)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k in _COLUMNS:
            h.update(np.ascontiguousarray(getattr(self, k)).tobytes())
        return h.hexdigest()[:16]


_COLUMNS = (
    "auction_id", "features", "value", "mu0", "unshaded_bid", "shaded_bid", "upstream_pctr",
    "won", "slot_won", "cost", "wp", "original_slot", "clicked",
)


@dataclass
class Resolution:
    """Outcome of one bid vector against an AuctionBatch."""

    bids: np.ndarray
    unshaded_bid: np.ndarray
    won: np.ndarray
    slot: np.ndarray
    cost: np.ndarray
    wp: np.ndarray
    original_slot: np.ndarray
    clicked: np.ndarray


def resolve_batch(batch: AuctionBatch, bids, unshaded, landscape: LandscapeSpec) -> Resolution:
    bids = np.asarray(bids, dtype=np.float64)
    won, slot, cost, wp = resolve_auctions(bids, batch.competitors, batch.n_competitors, batch.K)
    orig_won, orig_slot, _, _ = resolve_auctions(unshaded, batch.competitors, batch.n_competitors, batch.K)
    u = landscape.slot_factor_matrix()[landscape.scene_of(batch.features), np.maximum(slot - 1, 0)]
    clicked = won & (batch.click_u < batch.q * u)
    return Resolution(bids, unshaded, won, slot, cost, wp, np.where(orig_won, orig_slot, 0), clicked)


def apply_policy(policy: Policy, request: BidRequest):
    """Run a policy and quantize its bids. Returns (bids, accepted mask)."""
    raw = np.asarray(policy(request), dtype=np.float64)
    if raw.shape != request.unshaded_bid.shape:
        raise DataError(f"policy returned shape {raw.shape}, expected {request.unshaded_bid.shape}")
    bids = to_milli(raw)
    ok = np.isfinite(bids) & (bids > 0) & (bids <= request.unshaded_bid)
    return np.where(ok, bids, 0.0), ok


def generate_dataset(
    landscape: LandscapeSpec, policy: Policy, n_auctions: int, seed: int, threads: int = 1
) -> Dataset:
    """Sample auctions, bid with ``policy`` and log outcomes. Auctions whose
    bid is non-positive (or above the unshaded bid) are dropped and counted
    in ``meta.n_rejected``."""
    batch = sample_auctions(landscape, n_auctions, seed, threads=threads)
    req = batch.request(landscape.mu0)
    bids, ok = apply_policy(policy, req)
    idx = np.flatnonzero(ok)
    batch = batch.take(idx)
    req = batch.request(landscape.mu0)
    res = resolve_batch(batch, bids[idx], req.unshaded_bid, landscape)
    n = len(idx)
    ds = Dataset(
        auction_id=idx.astype(np.int64),
        features=batch.features,
        value=batch.value,
        mu0=np.full(n, float(landscape.mu0)),
        unshaded_bid=req.unshaded_bid,
        shaded_bid=res.bids,
        upstream_pctr=batch.upstream_pctr,
        won=res.won,
        slot_won=res.slot.astype(np.int64),
        cost=res.cost,
        wp=res.wp,
        original_slot=res.original_slot.astype(np.int64),
        clicked=res.clicked,
        meta=None,
        field_names=landscape.field_names,
    )
    ds.meta = DatasetMeta(
        N=n,
        N_plus=int(ds.winnable.sum()),
        N_won=int(ds.won.sum()),
        N_clicked=int(ds.clicked.sum()),
        seed=seed,
        n_rejected=int(n_auctions - n),
        landscape_fingerprint=landscape.fingerprint(),
        field_names=landscape.field_names,
        vocab=tuple(landscape.vocab[f] for f in landscape.field_names),
    )
    return ds


# -- logging policies ------------------------------------------------------

class RandomRatioPolicy:
    """Logging policy: shade by a ratio drawn uniformly from [low, high]."""

    def __init__(self, low: float = 0.4, high: float = 1.0):
        self.low, self.high = low, high

    def __call__(self, req: BidRequest) -> np.ndarray:
        return req.unshaded_bid * (self.low + (self.high - self.low) * req.noise)


class FixedRatioPolicy:
    def __init__(self, ratio: float):
        self.ratio = ratio

    def __call__(self, req: BidRequest) -> np.ndarray:
        return req.unshaded_bid * self.ratio


def unshaded_policy(req: BidRequest) -> np.ndarray:
    return req.unshaded_bid.copy()


def logging_policy(landscape: LandscapeSpec) -> RandomRatioPolicy:
    return RandomRatioPolicy(*landscape.logging_ratio)


# -- files -----------------------------------------------------------------

def write_dataset(path, ds: Dataset, landscape: Optional[LandscapeSpec] = None):
    """Write ``<path>`` (JSON lines) and ``<path>.meta.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in ds.records():
            fh.write(json.dumps(rec.to_json_dict(), separators=(",", ":")) + "\n")
    meta = asdict(ds.meta)
    meta["field_names"] = list(ds.meta.field_names)
    meta["vocab"] = list(ds.meta.vocab)
    meta["dataset_fingerprint"] = ds.fingerprint()
    if landscape is not None:
        meta["landscape_fingerprint"] = landscape.fingerprint()
    with open(meta_path(path), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def read_dataset(path, landscape: Optional[LandscapeSpec] = None) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset not found: {path}")
    try:
        with open(meta_path(path)) as fh:
            m = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"missing meta file {meta_path(path)}") from None
    if landscape is not None and m.get("landscape_fingerprint") != landscape.fingerprint():
        raise FingerprintMismatch(
            f"dataset {path} was generated from landscape {m.get('landscape_fingerprint')}, "
            f"expected {landscape.fingerprint()}"
        )
    names = tuple(m["field_names"])
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    if not rows:
        raise DataError(f"dataset {path} is empty")
    col = lambda k: [r[k] for r in rows]  # noqa: E731
    slot = np.array([r["slot_won"] or 0 for r in rows], dtype=np.int64)
    ds = Dataset(
        auction_id=np.array(col("auction_id"), dtype=np.int64),
        features=np.array([[r["features"][n] for n in names] for r in rows], dtype=np.int64),
        value=np.array(col("value"), dtype=np.float64),
        mu0=np.array(col("mu0"), dtype=np.float64),
        unshaded_bid=np.array(col("unshaded_bid"), dtype=np.float64),
        shaded_bid=np.array(col("shaded_bid"), dtype=np.float64),
        upstream_pctr=np.array(col("upstream_pctr"), dtype=np.float64),
        won=np.array(col("won"), dtype=bool),
        slot_won=slot,
        cost=np.array([np.nan if r["cost"] is None else r["cost"] for r in rows], dtype=np.float64),
        wp=np.array(col("wp"), dtype=np.float64),
        original_slot=np.array([r["original_slot"] or 0 for r in rows], dtype=np.int64),
        clicked=np.array(col("clicked"), dtype=bool),
        meta=None,
        field_names=names,
    )
    ds.meta = DatasetMeta(
        N=m["N"], N_plus=m["N_plus"], N_won=m["N_won"], N_clicked=m["N_clicked"], seed=m["seed"],
        n_rejected=m.get("n_rejected", 0), landscape_fingerprint=m.get("landscape_fingerprint", ""),
        field_names=names, vocab=tuple(m.get("vocab", ())),
    )
    return ds
