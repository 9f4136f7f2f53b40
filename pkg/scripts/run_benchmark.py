"""Train every method on the default benchmark and replay them on paired
evaluation auctions.

    python scripts/run_benchmark.py --seeds 1 2 3 --ablations --out runs/benchmark.json

Prints Surplus(P&S) per seed and method, the seed means and the PCOC of the
MEBS calibration against the upstream pCTR.
"""
import argparse
import json
import logging
from dataclasses import replace

import numpy as np
from threadpoolctl import threadpool_limits

from bidshade.benchmark import ABLATIONS, METHODS, BenchmarkConfig, run_benchmark


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--n-train", type=int, default=200_000)
    ap.add_argument("--n-eval", type=int, default=50_000)
    ap.add_argument("--preset", default="trainable")
    ap.add_argument("--ablations", action="store_true", help="also train the three MEBS ablations")
    ap.add_argument("--out", help="write per-seed results to this JSON file")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    cfg = replace(BenchmarkConfig(), preset=args.preset, n_train=args.n_train, n_eval=args.n_eval,
                  seeds=tuple(args.seeds))
    with threadpool_limits(limits=1):
        results = run_benchmark(cfg, ablations=tuple(ABLATIONS) if args.ablations else ())

    names = list(METHODS) + (list(ABLATIONS) if args.ablations else [])
    print(f"{'seed':<6}" + "".join(f"{n:>10}" for n in names) + f"{'pcoc':>8}{'pcoc_up':>9}")
    for r in results:
        print(f"{r.seed:<6}" + "".join(f"{r.reports[n].surplus_ps:>10.3f}" for n in names)
              + f"{r.pcoc_calibrated:>8.3f}{r.pcoc_upstream:>9.3f}")
    means = {n: float(np.mean([r.reports[n].surplus_ps for r in results])) for n in names}
    print(f"{'mean':<6}" + "".join(f"{means[n]:>10.3f}" for n in names))

    if args.out:
        rows = [{"seed": r.seed, "surplus_ps": {n: r.reports[n].surplus_ps for n in names},
                 "surplus_p": {n: r.reports[n].surplus_p for n in names},
                 "pcoc_calibrated": r.pcoc_calibrated, "pcoc_upstream": r.pcoc_upstream,
                 "train_seconds": r.train_seconds} for r in results]
        with open(args.out, "w") as fh:
            json.dump({"config": {"preset": cfg.preset, "n_train": cfg.n_train, "n_eval": cfg.n_eval,
                                  "seeds": list(cfg.seeds)}, "seeds": rows, "mean_surplus_ps": means}, fh, indent=1)


if __name__ == "__main__":
    main()
