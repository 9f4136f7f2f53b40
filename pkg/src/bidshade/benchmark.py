"""Train-and-replay harness used by the CLI, the acceptance suite and the
scripts: one landscape, logged training data per seed, fresh evaluation
auctions, every method replayed on the same stream."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence

import numpy as np

from .auction_sim import generate_dataset, logging_policy, make_landscape, sample_auctions
from .auction_sim.landscape import LandscapeSpec
from .baselines import SrrBundle, train_npm, train_srr, train_tsbs
from .evaluation import (
    EvalReport, SlotFactorTable, baseline_table, make_report, pcoc, replay_policies,
)
from .mebs import MebsConfig, train_mebs

log = logging.getLogger(__name__)

METHODS = ("mebs", "srr", "tsbs", "npm")
ABLATIONS = {
    "no_share": {"share_embedding": False},
    "mse_loss": {"shading_loss": "mse"},
    "no_calib": {"calibrated": False},
}


@dataclass
class BenchmarkConfig:
    preset: str = "trainable"
    landscape_seed: int = 0
    n_train: int = 200_000
    n_eval: int = 50_000
    seeds: tuple = (1, 2, 3)
    mu0: float = 1.0
    tsbs_G: int = 20
    npm_fields: tuple = ("scene", "ad_bucket")
    npm_support: int = 50
    mebs: MebsConfig = field(default_factory=MebsConfig)
    threads: int = 1

    def landscape(self) -> LandscapeSpec:
        return make_landscape(self.preset, seed=self.landscape_seed)


def eval_seed(seed: int) -> int:
    """Evaluation auctions use a seed disjoint from every training seed."""
    return 1_000_003 + seed


def train_slot_table(ds, landscape, support=50) -> SlotFactorTable:
    return SlotFactorTable.build(ds.scene_id, ds.slot_won, ds.clicked, landscape, support)


@dataclass
class SeedResult:
    seed: int
    reports: Dict[str, EvalReport]
    pcoc_calibrated: float = float("nan")
    pcoc_upstream: float = float("nan")
    train_seconds: dict = field(default_factory=dict)
    bundles: dict = field(default_factory=dict)    # trained models, in memory only


def run_seed(cfg: BenchmarkConfig, seed: int, methods: Sequence[str] = METHODS,
             ablations: Sequence[str] = (), landscape: Optional[LandscapeSpec] = None) -> SeedResult:
    land = landscape or cfg.landscape()
    ds = generate_dataset(land, logging_policy(land), cfg.n_train, seed, threads=cfg.threads)
    batch = sample_auctions(land, cfg.n_eval, eval_seed(seed), threads=cfg.threads)
    mcfg = replace(cfg.mebs, seed=seed)
    policies, ctr_models, secs, bundles = {}, {}, {}, {}

    def timed(name, fn):
        t0 = time.perf_counter()
        out = fn()
        secs[name] = time.perf_counter() - t0
        log.info("seed %d: trained %s in %.1fs", seed, name, secs[name])
        return out

    mebs = None
    if "mebs" in methods:
        mebs = timed("mebs", lambda: train_mebs(ds, mcfg, land.fingerprint()))
        policies["mebs"], ctr_models["mebs"] = mebs.policy(), mebs.calibration
        bundles["mebs"] = mebs
    if "srr" in methods:
        m, _ = timed("srr", lambda: train_srr(ds, mcfg))
        bundles["srr"] = SrrBundle(m, mcfg, ds.fingerprint(), land.fingerprint())
        policies["srr"] = bundles["srr"].policy()
    if "tsbs" in methods:
        t = timed("tsbs", lambda: train_tsbs(ds, mcfg, cfg.tsbs_G))
        policies["tsbs"], ctr_models["tsbs"] = t.policy(), t.calibration
        bundles["tsbs"] = t
    if "npm" in methods:
        table = train_slot_table(ds, land, cfg.npm_support)
        npm = timed("npm", lambda: train_npm(ds, table, cfg.npm_fields, cfg.npm_support, mcfg.r_min))
        policies["npm"] = npm.policy()
        bundles["npm"] = npm
    for a in ablations:
        b = timed(a, lambda: train_mebs(ds, replace(mcfg, **ABLATIONS[a]), land.fingerprint()))
        policies[a], ctr_models[a] = b.policy(), b.calibration
        bundles[a] = b

    table, results = replay_policies(policies, batch, land, cfg.mu0, baseline_table(batch, land, cfg.mu0))
    reports = {}
    for name, rr in results.items():
        res = rr.resolution
        cm = ctr_models.get(name)
        pred = None
        if cm is not None:
            pred = np.where(res.won, cm.predict(batch.features, np.where(res.won, res.bids, 1.0),
                                                 batch.upstream_pctr), 0.0)
        reports[name] = make_report(name, rr, pred, batch.upstream_pctr, seeds=[seed])
    out = SeedResult(seed, reports, train_seconds=secs, bundles=bundles)
    if mebs is not None and mebs.calibration is not None:
        res = results["mebs"].resolution
        w = res.won.astype(bool)
        pred = mebs.calibration.predict(batch.features[w], res.bids[w], batch.upstream_pctr[w])
        out.pcoc_calibrated = pcoc(pred, res.clicked[w])
        out.pcoc_upstream = pcoc(batch.upstream_pctr[w], res.clicked[w])
    return out


def run_benchmark(cfg: BenchmarkConfig, methods: Sequence[str] = METHODS, ablations: Sequence[str] = ()):
    land = cfg.landscape()
    return [run_seed(cfg, s, methods, ablations, land) for s in cfg.seeds]
