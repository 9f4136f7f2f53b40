"""Offline evaluation: slot-factor tables, paired counterfactual replay,
realized surplus, PCOC, optimal-bidding property checks and inference timing."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .auction_sim.dataset import AuctionBatch, Resolution, apply_policy, resolve_batch
from .auction_sim.landscape import LandscapeSpec
from .auction_sim.truth import truth_curves
from .baselines import first_argmax
from .campaign_control import SolverReport, bisect_mu0
from .errors import DataError, FingerprintMismatch, MetricUndefined

PER = 1000.0


# -- slot factors ----------------------------------------------------------------

def scene_groups(landscape: LandscapeSpec) -> np.ndarray:
    """Group id per scene; scenes with identical slot profiles share a group."""
    seen, out = {}, []
    for p in landscape.profiles:
        out.append(seen.setdefault(p.u, len(seen)))
    return np.array(out, dtype=np.int64)


@dataclass
class SlotFactorTable:
    """Empirical CTR per position and per (position, scene group), from won
    impressions. Cells under ``support`` impressions (or without clicks)
    fall back to the position-only value, which falls back to the overall CTR."""

    by_slot: np.ndarray          # (K_max,)
    by_group: np.ndarray         # (n_groups, K_max), NaN where unsupported
    group_of_scene: np.ndarray
    k_of_scene: np.ndarray
    support: int = 50
    counts: Optional[np.ndarray] = None

    @classmethod
    def build(cls, scene, slot, clicked, landscape: LandscapeSpec, support: int = 50) -> "SlotFactorTable":
        scene, slot = np.asarray(scene), np.asarray(slot)
        clicked = np.asarray(clicked, dtype=np.float64)
        won = slot > 0
        if not won.any() or clicked[won].sum() == 0:
            raise MetricUndefined("slot factors need won impressions with at least one click")
        groups = scene_groups(landscape)
        G, K = groups.max() + 1, landscape.k_max
        g, k = groups[scene[won]], slot[won] - 1
        imp, clk = np.zeros((G, K)), np.zeros((G, K))
        np.add.at(imp, (g, k), 1)
        np.add.at(clk, (g, k), clicked[won])
        overall = clk.sum() / imp.sum()
        s_imp, s_clk = imp.sum(0), clk.sum(0)
        with np.errstate(invalid="ignore", divide="ignore"):
            by_slot = np.where((s_imp >= support) & (s_clk > 0), s_clk / s_imp, overall)
            by_group = np.where((imp >= support) & (clk > 0), clk / imp, np.nan)
        k_of_scene = np.array([p.K for p in landscape.profiles], dtype=np.int64)
        return cls(by_slot, by_group, groups, k_of_scene, support, imp.astype(np.int64))

    def factor(self, scene, slot, variant: str = "ps") -> np.ndarray:
        """CTR factor for (scene, 1-based slot); variant "ps" or "p"."""
        scene, slot = np.asarray(scene), np.asarray(slot)
        k = np.clip(slot - 1, 0, len(self.by_slot) - 1)
        base = self.by_slot[k]
        if variant == "p":
            return base
        v = self.by_group[self.group_of_scene[scene], k]
        return np.where(np.isfinite(v), v, base)

    def k_of(self, scene) -> np.ndarray:
        return self.k_of_scene[np.asarray(scene)]

    def to_dict(self):
        return {
            "by_slot": self.by_slot.tolist(),
            "by_group": [[None if not np.isfinite(v) else float(v) for v in r] for r in self.by_group],
            "group_of_scene": self.group_of_scene.tolist(), "k_of_scene": self.k_of_scene.tolist(),
            "support": self.support,
        }


# -- replay and surplus ---------------------------------------------------------

@dataclass
class SurplusSamples:
    """Per-record realized surplus under both slot-factor variants."""

    margin: np.ndarray       # mu0 V - C(b), zero when lost
    won: np.ndarray
    slot: np.ndarray
    scene: np.ndarray
    S_ps: np.ndarray
    S_p: np.ndarray

    def __len__(self):
        return len(self.won)

    def concat(self, other: "SurplusSamples") -> "SurplusSamples":
        return SurplusSamples(*(np.concatenate([getattr(self, k), getattr(other, k)])
                                for k in ("margin", "won", "slot", "scene", "S_ps", "S_p")))


def slot_adjusted_pctr(upstream_pctr, u_k, u_i):
    """pCTR_k = (u_k / u_i) pCTR(x): move an upstream estimate from slot i to slot k."""
    return np.asarray(u_k, dtype=np.float64) / np.asarray(u_i, dtype=np.float64) * upstream_pctr


def surplus_samples(res: Resolution, scene, upstream_pctr, table: SlotFactorTable,
                    reference_slot: Optional[int] = None) -> SurplusSamples:
    """S = (mu0 V - C(b)) 1{b >= wp} (u_k / u_i) pCTR(x).

    u_i belongs to the original (unshaded) slot; ``reference_slot`` replaces
    it with a fixed slot, which matches an upstream pCTR defined at that slot.
    """
    won = res.won.astype(bool)
    if np.any(won & (res.original_slot == 0)) and reference_slot is None:
        raise DataError("a shaded bid won where the unshaded bid would lose")
    scene = np.asarray(scene)
    margin = np.where(won, res.unshaded_bid - np.nan_to_num(res.cost), 0.0)
    slot = np.where(won, res.slot, 1)
    orig = np.full_like(slot, reference_slot) if reference_slot else np.where(res.original_slot > 0,
                                                                                 res.original_slot, 1)
    out = {}
    for v in ("ps", "p"):
        pk = slot_adjusted_pctr(upstream_pctr, table.factor(scene, slot, v), table.factor(scene, orig, v))
        out[v] = np.where(won, margin * pk, 0.0)
    return SurplusSamples(margin, won, np.where(won, res.slot, 0), scene, out["ps"], out["p"])


def surplus_metric(samples: SurplusSamples, variant: str = "ps", normalize: bool = True) -> float:
    """Total realized surplus, per 1000 auctions when ``normalize``."""
    if len(samples) == 0:
        raise DataError("surplus of an empty sample set")
    s = samples.S_ps if variant == "ps" else samples.S_p
    total = float(np.sum(s))
    return total * PER / len(samples) if normalize else total


def pcoc(pred, clicked, won=None) -> float:
    """Mean predicted CTR over empirical CTR on won impressions."""
    pred, clicked = np.asarray(pred, dtype=np.float64), np.asarray(clicked, dtype=np.float64)
    if won is not None:
        w = np.asarray(won, dtype=bool)
        pred, clicked = pred[w], clicked[w]
    if clicked.sum() == 0:
        raise MetricUndefined("PCOC is undefined without clicks")
    return float(pred.mean() / clicked.mean())


@dataclass
class ReplayResult:
    name: str
    resolution: Resolution
    samples: SurplusSamples
    n_rejected: int = 0


def check_fingerprint(bundle, landscape: LandscapeSpec):
    fp = getattr(bundle, "landscape_fingerprint", "")
    if fp and fp != landscape.fingerprint():
        raise FingerprintMismatch(
            f"bundle trained on landscape {fp}, evaluation landscape is {landscape.fingerprint()}")


def baseline_table(batch: AuctionBatch, landscape: LandscapeSpec, mu0: float, support: int = 50) -> SlotFactorTable:
    """Slot factors from the evaluation auctions at their original (unshaded) positions."""
    req = batch.request(mu0)
    res = resolve_batch(batch, req.unshaded_bid, req.unshaded_bid, landscape)
    return SlotFactorTable.build(landscape.scene_of(batch.features), res.slot, res.clicked, landscape, support)


def replay_policies(policies: Dict[str, Callable], batch: AuctionBatch, landscape: LandscapeSpec, mu0: float,
                    table: Optional[SlotFactorTable] = None, reference_slot: Optional[int] = None):
    """Run every policy on the same auctions and click draws.

    Returns (table, {name: ReplayResult})."""
    table = table or baseline_table(batch, landscape, mu0)
    req = batch.request(mu0)
    scene = landscape.scene_of(batch.features)
    out = {}
    for name, pol in policies.items():
        bids, ok = apply_policy(pol, req)
        res = resolve_batch(batch, bids, req.unshaded_bid, landscape)
        out[name] = ReplayResult(name, res, surplus_samples(res, scene, batch.upstream_pctr, table, reference_slot),
                                 int((~ok).sum()))
    return table, out


# -- reports -----------------------------------------------------------------------

@dataclass
class EvalReport:
    policy: str
    surplus_ps: float
    surplus_p: float
    pcoc: float
    win_rate: float
    per_slot: dict = field(default_factory=dict)
    per_scene: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)
    n_auctions: int = 0
    threads: int = 1

    def __post_init__(self):
        if not (math.isfinite(self.surplus_ps) and math.isfinite(self.surplus_p)):
            raise DataError(f"{self.policy}: non-finite surplus")


def make_report(name: str, rr: ReplayResult, pred_ctr=None, upstream_pctr=None, seeds=(), timing=None) -> EvalReport:
    s, res = rr.samples, rr.resolution
    won = res.won.astype(bool)
    pred = upstream_pctr if pred_ctr is None else pred_ctr
    try:
        pc = pcoc(pred, res.clicked, won)
    except MetricUndefined:
        pc = float("nan")
    n = len(s)
    per_slot = {int(k): float(s.S_ps[s.slot == k].sum() * PER / n) for k in np.unique(s.slot[s.won])}
    per_scene = {int(c): float(s.S_ps[s.scene == c].sum() * PER / n) for c in np.unique(s.scene)}
    return EvalReport(name, surplus_metric(s, "ps"), surplus_metric(s, "p"), pc, float(won.mean()), per_slot,
                      per_scene, timing or {}, list(seeds), n)


def reports_to_json(reports: Sequence[EvalReport], extra: Optional[dict] = None) -> str:
    d = {"reports": [asdict(r) for r in reports]}
    if extra:
        d.update(extra)
    return json.dumps(d, indent=1, sort_keys=True, default=float)


def render_table(reports: Sequence[EvalReport]) -> str:
    """Aligned text table: method x Surplus(P&S) x Surplus(P) x PCOC x win rate."""
    head = ("Method", "Surplus(P&S)", "Surplus(P)", "PCOC", "WinRate")
    rows = [(r.policy, f"{r.surplus_ps:.4f}", f"{r.surplus_p:.4f}", f"{r.pcoc:.4f}", f"{r.win_rate:.4f}")
            for r in reports]
    w = [max(len(x) for x in col) for col in zip(head, *rows)]
    line = "  ".join(h.ljust(w[0]) if i == 0 else h.rjust(w[i]) for i, h in enumerate(head))
    out = [line, "-" * len(line)]
    for r in rows:
        out.append("  ".join(c.ljust(w[0]) if i == 0 else c.rjust(w[i]) for i, c in enumerate(r)))
    return "\n".join(out)


def breakdown_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["policy", "kind", "key", "surplus_ps_per_1000"])
    for r in reports:
        for k, v in sorted(r.per_slot.items()):
            wr.writerow([r.policy, "slot", k, f"{v:.6g}"])
        for k, v in sorted(r.per_scene.items()):
            wr.writerow([r.policy, "scene", k, f"{v:.6g}"])
    return buf.getvalue()


# -- optimal-bidding properties ------------------------------------------------------

@dataclass
class TheoremReport:
    n_samples: int
    mu0s: list
    unimodal: bool
    non_unimodal: list            # (sample, mu0) pairs
    plateaus: list                # (sample, mu0, width) where the maximum is not unique
    bstar_monotone: bool
    bstar_violations: list
    costs: list
    cost_strictly_increasing: bool
    budget: float
    solve: Optional[dict]
    solve_within_tol: bool

    @property
    def passed(self) -> bool:
        return self.unimodal and self.bstar_monotone and self.cost_strictly_increasing and self.solve_within_tol

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True, default=float)


def scan_shape(s: np.ndarray, rtol: float = 1e-9):
    """(is_unimodal, plateau_width) of one surplus scan. Steps smaller than
    ``rtol`` times the peak count as flat."""
    peak = float(np.max(s))
    tol = rtol * max(abs(peak), 1e-300)
    d = np.diff(s)
    sign = np.where(d > tol, 1, np.where(d < -tol, -1, 0))
    nz = sign[sign != 0]
    first_down = np.argmax(nz < 0) if np.any(nz < 0) else len(nz)
    unimodal = not np.any(nz[first_down:] > 0)
    width = int(np.sum(s >= peak - tol))
    return bool(unimodal), width


def verify_theorem(landscape: LandscapeSpec, features, value, mu0s=(0.5, 1.0, 2.0), resolution: int = 400,
                   budget: Optional[float] = None, tol: float = 0.01, rtol: float = 1e-9) -> TheoremReport:
    """Ground-truth checks on one nested bid grid: unimodal surplus scans,
    oracle bid non-decreasing in mu0, strictly increasing total expected cost,
    and a budget solve landing within ``tol``.

    Bids are ``mu0_max V j / N``; the candidates for mu0 are those not above
    mu0 V, so every mu0 sees at least ``resolution`` points."""
    mu0s = sorted(float(m) for m in mu0s)
    V = np.asarray(value, dtype=np.float64)
    mmax = mu0s[-1]
    N = int(math.ceil(resolution * mmax / mu0s[0]))
    ratios = np.arange(1, N + 1) / N
    tc = truth_curves(landscape, features, mmax * V, ratios)
    P, pk, C, cc = tc.win_prob, tc.pctr_slot, tc.cost, tc.cost_click
    rows = np.arange(len(V))

    def oracle(m):
        n = int(math.floor(N * m / mmax + 1e-9))
        s = ((m * V)[:, None] - C[:, :n]) * P[:, :n] * pk[:, :n]
        return s, first_argmax(s)

    def total_cost(m):
        _, j = oracle(m)
        return float(np.sum(cc[rows, j]))

    non_uni, plateaus, bstars, costs = [], [], [], []
    for m in mu0s:
        s, j = oracle(m)
        for i in range(len(V)):
            uni, width = scan_shape(s[i], rtol)
            if not uni:
                non_uni.append((int(i), m))
            if width > 1:
                plateaus.append((int(i), m, width))
        bstars.append(tc.bids[rows, j])
        costs.append(float(np.sum(cc[rows, j])))
    viol = []
    for a in range(len(mu0s) - 1):
        bad = np.flatnonzero(bstars[a + 1] < bstars[a])
        viol += [(int(i), mu0s[a], mu0s[a + 1]) for i in bad]
    inc = all(b > a for a, b in zip(costs, costs[1:]))
    B = budget if budget is not None else 0.5 * (costs[0] + costs[-1])
    try:
        rep: Optional[SolverReport] = bisect_mu0(total_cost, B, (mu0s[0], mmax), tol, max_widen=0,
                                                 check_monotone=False)
        ok = abs(rep.cost - B) <= tol * B
        solve = asdict(rep)
    except Exception as e:  # report, do not raise
        ok, solve = False, {"error": str(e)}
    return TheoremReport(len(V), mu0s, not non_uni, non_uni, plateaus, not viol, viol, costs, inc, B, solve, ok)


# -- inference timing -----------------------------------------------------------

def bench_inference(policies: Dict[str, object], features, unshaded, pctr, repetitions: int = 10,
                    warmup: int = 1) -> dict:
    """Mean wall-clock seconds per batch. Each policy exposes
    ``infer(features, unshaded, pctr) -> (bids, timing)`` where timing splits
    model and search time. BLAS is pinned to one thread."""
    from threadpoolctl import threadpool_limits

    out = {}
    with threadpool_limits(limits=1):
        for name, pol in policies.items():
            for _ in range(warmup):
                pol.infer(features, unshaded, pctr)
            model, search, total, passes = [], [], [], 0
            for _ in range(repetitions):
                t0 = time.perf_counter()
                _, t = pol.infer(features, unshaded, pctr)
                total.append(time.perf_counter() - t0)
                model.append(t["model"])
                search.append(t["search"])
                passes = t.get("forward_passes", 0)
            out[name] = {
                "mean_total_s": float(np.mean(total)), "mean_model_s": float(np.mean(model)),
                "mean_search_s": float(np.mean(search)), "forward_passes": passes,
                "batch_size": int(len(unshaded)), "repetitions": repetitions, "threads": 1,
            }
    return out


def render_bench(table: dict) -> str:
    head = f"{'Method':<8} {'total_s':>10} {'model_s':>10} {'search_s':>10} {'passes':>6}"
    lines = [head, "-" * len(head)]
    for k, v in table.items():
        lines.append(f"{k:<8} {v['mean_total_s']:>10.4f} {v['mean_model_s']:>10.4f} {v['mean_search_s']:>10.4f} "
                     f"{v['forward_passes']:>6}")
    return "\n".join(lines)
