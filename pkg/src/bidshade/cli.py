"""Command-line entry point: ``bidshade gen-data | train | eval | bench | report``.

All commands share ``--config``, ``--seed``, ``--threads`` and ``--out``. The
output root holds ``data/``, ``bundles/<name>/``, ``eval/`` and ``bench/``;
each of them receives a ``config.resolved.json`` snapshot.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 training failure,
5 failed ``eval --gate`` check.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .auction_sim import generate_dataset, logging_policy, make_landscape, read_dataset, sample_auctions, write_dataset
from .auction_sim.landscape import LandscapeSpec
from .baselines import SrrBundle, TsbsBundle, NpmTable, train_npm, train_srr, train_tsbs
from .benchmark import eval_seed, train_slot_table
from .campaign_control import Replay, expected_cost, shading_policy, solve_mu0
from .config import RunConfig, load_config, write_snapshot
from .errors import (
    ConfigError, DataError, InfeasibleBudget, MonotonicityViolation, SchemaError, TrainingError,
)
from .evaluation import (
    EvalReport, bench_inference, breakdown_csv, check_fingerprint, make_report, render_bench, render_table,
    replay_policies, reports_to_json, verify_theorem,
)
from .mebs import MebsBundle, load_bundle as load_mebs, train_mebs

log = logging.getLogger("bidshade")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN, EXIT_GATE = 0, 2, 3, 4, 5
LOADERS = {"mebs": load_mebs, "srr": SrrBundle.load, "tsbs": TsbsBundle.load, "npm": NpmTable.load}


def load_any_bundle(directory):
    """Load a bundle of any method, dispatching on its manifest."""
    mp = Path(directory) / "manifest.json"
    if not mp.exists():
        raise DataError(f"bundle manifest not found in {directory}")
    method = json.loads(mp.read_text()).get("method")
    if method not in LOADERS:
        raise DataError(f"{directory}: unknown bundle method '{method}'")
    return LOADERS[method](directory)


def build_landscape(cfg: RunConfig) -> LandscapeSpec:
    lc = cfg.landscape
    return make_landscape(lc.preset, seed=lc.seed, vocab=lc.vocab, shared_profile=lc.shared_profile,
                          flat_slots=lc.flat_slots)


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text if text.endswith("\n") else text + "\n")


def _write_json(path: Path, obj):
    _write(path, json.dumps(obj, indent=1, sort_keys=True, default=float))


# -- commands --------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args) -> int:
    land = build_landscape(cfg)
    out = Path(cfg.out) / "data"
    ds = generate_dataset(land, logging_policy(land), cfg.data.n_train, cfg.seed, threads=cfg.threads)
    path = out / "train.jsonl"
    try:
        write_dataset(path, ds, land)
        write_snapshot(cfg, out)
    except OSError as e:
        raise ConfigError(f"cannot write dataset to {out}: {e}") from e
    m = ds.meta
    print(json.dumps({"path": str(path), "N": m.N, "N_plus": m.N_plus, "N_won": m.N_won,
                      "N_clicked": m.N_clicked, "seed": m.seed, "landscape_fingerprint": land.fingerprint(),
                      "dataset_fingerprint": ds.fingerprint()}, indent=1))
    return EXIT_OK


def _ablation(args) -> dict:
    ab = {}
    if args.no_share_embedding:
        ab["share_embedding"] = False
    if args.mse_shading_loss:
        ab["shading_loss"] = "mse"
    if args.no_calibration:
        ab["calibrated"] = False
    return ab


def _bundle_name(args) -> str:
    if args.name:
        return args.name
    tags = [t for t, on in (("no_share", args.no_share_embedding), ("mse_loss", args.mse_shading_loss),
                            ("no_calib", args.no_calibration)) if on]
    return "-".join([args.method] + tags)


def cmd_train(cfg: RunConfig, args) -> int:
    land = build_landscape(cfg)
    data = Path(args.data) if args.data else Path(cfg.out) / "data" / "train.jsonl"
    ds = read_dataset(data, land)
    ab = _ablation(args)
    if ab and args.method != "mebs":
        raise ConfigError("ablation flags apply to --method mebs only")
    mcfg = cfg.model.mebs(cfg.seed, **ab)
    fp = land.fingerprint()
    if args.method == "mebs":
        bundle = train_mebs(ds, mcfg, fp)
    elif args.method == "srr":
        model, _ = train_srr(ds, mcfg)
        bundle = SrrBundle(model, mcfg, ds.fingerprint(), fp)
    elif args.method == "tsbs":
        bundle = train_tsbs(ds, mcfg, cfg.baselines.tsbs_G)
    else:
        table = train_slot_table(ds, land, cfg.baselines.npm_support)
        bundle = train_npm(ds, table, cfg.baselines.npm_fields, cfg.baselines.npm_support, mcfg.r_min)
    out = Path(cfg.out) / "bundles" / _bundle_name(args)
    bundle.save(out)
    write_snapshot(cfg, out)
    _write_json(out / "inputs.json", {"dataset": str(data), "dataset_fingerprint": ds.fingerprint(),
                                      "landscape_fingerprint": fp})
    print(f"wrote {args.method} bundle to {out}")
    return EXIT_OK


def _bundle_dirs(cfg: RunConfig, given) -> list:
    if given:
        dirs = [Path(d) for d in given]
    else:
        root = Path(cfg.out) / "bundles"
        dirs = sorted(p for p in root.glob("*") if (p / "manifest.json").exists()) if root.exists() else []
    if not dirs:
        raise DataError("no bundles to evaluate (pass --bundles or train into <out>/bundles)")
    return dirs


def _load_bundles(cfg, given, land):
    bundles = {}
    for d in _bundle_dirs(cfg, given):
        b = load_any_bundle(d)
        check_fingerprint(b, land)
        if d.name in bundles:
            raise ConfigError(f"duplicate bundle name '{d.name}'")
        bundles[d.name] = b
    return bundles


def _solver_report(cfg: RunConfig, bundle: MebsBundle, batch, scene_col: int) -> dict:
    replay = Replay(batch.features, batch.value, batch.upstream_pctr, scene_col)
    pol = shading_policy(bundle.shading)
    budget = cfg.campaign.budget
    if budget is None:
        budget = expected_cost(replay, cfg.mu0, pol, bundle.win_rate, bundle.calibration, bundle.rcb)
    try:
        rep = solve_mu0(replay, budget, pol, bundle.win_rate, bundle.calibration, bundle.rcb,
                        cfg.campaign.bracket, cfg.campaign.tol)
        return json.loads(rep.to_json())
    except MonotonicityViolation as e:
        return {"error": str(e), **(json.loads(e.report.to_json()) if e.report else {})}
    except InfeasibleBudget as e:
        return {"error": str(e), "budget": e.budget, "achievable": list(e.achievable)}


def cmd_eval(cfg: RunConfig, args) -> int:
    land = build_landscape(cfg)
    bundles = _load_bundles(cfg, args.bundles, land)
    batch = sample_auctions(land, cfg.data.n_eval, eval_seed(cfg.seed), threads=cfg.threads)
    policies = {name: b.policy() for name, b in bundles.items()}
    table, results = replay_policies(policies, batch, land, cfg.mu0)
    reports = []
    for name, rr in results.items():
        calib = getattr(bundles[name], "calibration", None)
        pred = None
        if calib is not None:
            res = rr.resolution
            pred = np.where(res.won, calib.predict(batch.features, np.where(res.won, res.bids, 1.0),
                                                   batch.upstream_pctr), 0.0)
        reports.append(make_report(name, rr, pred, batch.upstream_pctr, seeds=[cfg.seed]))
        reports[-1].threads = cfg.threads

    out = Path(cfg.out) / "eval"
    extra = {"landscape_fingerprint": land.fingerprint(), "eval_seed": eval_seed(cfg.seed), "mu0": cfg.mu0,
             "slot_factors": table.to_dict()}
    _write(out / "report.json", reports_to_json(reports, extra))
    _write(out / "report.txt", render_table(reports))
    _write(out / "breakdown.csv", breakdown_csv(reports))
    _write_json(out / "inputs.json", {
        "landscape_fingerprint": land.fingerprint(),
        "bundles": {n: {"dir": str(d), "dataset_fingerprint": getattr(b, "dataset_fingerprint", ""),
                        "landscape_fingerprint": getattr(b, "landscape_fingerprint", "")}
                    for (n, b), d in zip(bundles.items(), _bundle_dirs(cfg, args.bundles))},
    })
    write_snapshot(cfg, out)
    print(render_table(reports))

    theorem = None
    if not args.no_theorem:
        tb = sample_auctions(land, cfg.theorem.n_samples, eval_seed(cfg.seed) + 1)
        theorem = verify_theorem(land, tb.features, tb.value, cfg.theorem.mu0s, cfg.theorem.resolution)
        _write(out / "theorem.json", theorem.to_json())
        print(f"optimal-bidding property checks: {'pass' if theorem.passed else 'FAIL'}")
    mebs = [(n, b) for n, b in bundles.items() if isinstance(b, MebsBundle)]
    if mebs:
        _write_json(out / "solver.json", {n: _solver_report(cfg, b, batch, land.col("scene")) for n, b in mebs})

    if args.gate:
        failures = _gate(reports, bundles, theorem)
        for f in failures:
            print(f"gate: {f}", file=sys.stderr)
        if failures:
            return EXIT_GATE
        print("gate: pass")
    return EXIT_OK


def _gate(reports, bundles, theorem) -> list:
    """MEBS bundles must not trail SRR bundles on Surplus(P&S); the property
    checks must pass when they were run."""
    by = {r.policy: r for r in reports}
    failures = []
    mebs = [n for n, b in bundles.items() if b.method == "mebs"]
    srr = [n for n, b in bundles.items() if b.method == "srr"]
    for m in mebs:
        for s in srr:
            if by[m].surplus_ps < by[s].surplus_ps:
                failures.append(f"{m} Surplus(P&S) {by[m].surplus_ps:.4f} < {s} {by[s].surplus_ps:.4f}")
    if theorem is not None and not theorem.passed:
        failures.append("optimal-bidding property checks failed (see theorem.json)")
    return failures


def cmd_bench(cfg: RunConfig, args) -> int:
    land = build_landscape(cfg)
    bundles = _load_bundles(cfg, args.bundles, land)
    batch = sample_auctions(land, cfg.bench.batch_size, eval_seed(cfg.seed) + 2, threads=cfg.threads)
    U = batch.request(cfg.mu0).unshaded_bid
    table = bench_inference(bundles, batch.features, U, batch.upstream_pctr, cfg.bench.repetitions)
    out = Path(cfg.out) / "bench"
    _write_json(out / "bench.json", table)
    _write(out / "bench.txt", render_bench(table))
    write_snapshot(cfg, out)
    print(render_bench(table))
    return EXIT_OK


def cmd_report(cfg: RunConfig, args) -> int:
    src = Path(args.input) if args.input else Path(cfg.out)
    done = False
    for rp in (src / "report.json", src / "eval" / "report.json"):
        if rp.exists():
            d = json.loads(rp.read_text())
            reports = [EvalReport(**r) for r in d["reports"]]
            _write(rp.with_name("report.txt"), render_table(reports))
            _write(rp.with_name("breakdown.csv"), breakdown_csv(reports))
            print(render_table(reports))
            done = True
            break
    for bp in (src / "bench.json", src / "bench" / "bench.json"):
        if bp.exists():
            table = json.loads(bp.read_text())
            _write(bp.with_name("bench.txt"), render_bench(table))
            print(render_bench(table))
            done = True
            break
    if not done:
        raise DataError(f"no report.json or bench.json under {src}")
    return EXIT_OK


# -- argument handling -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON run configuration")
    common.add_argument("--seed", type=int, help="run seed (data, model init, evaluation stream)")
    common.add_argument("--threads", type=int, help="worker cap; 1 is the bit-reproducible path")
    common.add_argument("--out", help="output root directory")
    common.add_argument("--preset", help="landscape preset")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="bidshade", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate a logged training dataset")
    g.add_argument("--n", type=int, help="number of auctions")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train one method into a bundle")
    t.add_argument("--method", choices=sorted(LOADERS), required=True)
    t.add_argument("--data", help="dataset path (default <out>/data/train.jsonl)")
    t.add_argument("--name", help="bundle directory name under <out>/bundles")
    t.add_argument("--no-share-embedding", action="store_true")
    t.add_argument("--mse-shading-loss", action="store_true")
    t.add_argument("--no-calibration", action="store_true")
    t.add_argument("--G", type=int, help="TSBS candidate count")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="paired replay of bundles on fresh auctions")
    e.add_argument("--bundles", nargs="+", help="bundle directories (default: all under <out>/bundles)")
    e.add_argument("--n", type=int, help="number of evaluation auctions")
    e.add_argument("--mu0", type=float)
    e.add_argument("--budget", type=float, help="campaign budget for the mu0 solve")
    e.add_argument("--no-theorem", action="store_true", help="skip the ground-truth property checks")
    e.add_argument("--gate", action="store_true", help="exit 5 if the acceptance gate fails")
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", parents=[common], help="inference timing of bundles")
    b.add_argument("--bundles", nargs="+")
    b.add_argument("--batch-size", type=int)
    b.add_argument("--repetitions", type=int)
    b.set_defaults(fn=cmd_bench)

    r = sub.add_parser("report", parents=[common], help="re-render stored JSON reports")
    r.add_argument("--input", help="directory holding report.json or bench.json (default <out>)")
    r.set_defaults(fn=cmd_report)
    return p


def resolve_config(args) -> RunConfig:
    """defaults < config file < flags."""
    cfg = load_config(args.config)
    for k in ("seed", "threads", "out"):
        v = getattr(args, k, None)
        if v is not None:
            setattr(cfg, k, v)
    if getattr(args, "preset", None):
        cfg.landscape.preset = args.preset
    n = getattr(args, "n", None)
    if n is not None:
        if args.command == "gen-data":
            cfg.data.n_train = n
        else:
            cfg.data.n_eval = n
    for flag, (sec, key) in {"G": ("baselines", "tsbs_G"), "budget": ("campaign", "budget"),
                             "batch_size": ("bench", "batch_size"), "repetitions": ("bench", "repetitions")}.items():
        v = getattr(args, flag, None)
        if v is not None:
            setattr(getattr(cfg, sec), key, v)
    if getattr(args, "mu0", None) is not None:
        cfg.mu0 = args.mu0
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        limit = contextlib.nullcontext()
        if cfg.threads == 1:
            from threadpoolctl import threadpool_limits
            limit = threadpool_limits(limits=1)
        with limit:
            return args.fn(cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SchemaError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as e:
        print(f"training error: {e}", file=sys.stderr)
        return EXIT_TRAIN
    except InfeasibleBudget as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
