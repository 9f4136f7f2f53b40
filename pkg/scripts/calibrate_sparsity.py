"""Find value_base / q_bias offsets that hit a preset's sparsity targets.

    python scripts/calibrate_sparsity.py --preset trainable --win 0.05 --click 0.10

Prints the offsets to paste into ``PRESETS`` in auction_sim/landscape.py.
"""
import argparse

from scipy.optimize import brentq

from bidshade.auction_sim import generate_dataset, logging_policy, make_landscape


def rates(preset, value_base, q_bias, n, seed):
    land = make_landscape(preset, value_base=value_base, q_bias=q_bias)
    ds = generate_dataset(land, logging_policy(land), n, seed)
    m = ds.meta
    return m.N_won / m.N, m.N_clicked / max(m.N_won, 1)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--preset", default="trainable")
    ap.add_argument("--win", type=float, default=0.05)
    ap.add_argument("--click", type=float, default=0.10)
    ap.add_argument("--n", type=int, default=400_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    q_bias = -2.0
    for _ in range(3):
        vb = brentq(lambda v: rates(args.preset, v, q_bias, args.n, args.seed)[0] - args.win, -4, 2, xtol=1e-3)
        q_bias = brentq(lambda q: rates(args.preset, vb, q, args.n, args.seed)[1] - args.click, -9, 2, xtol=1e-3)
    w, c = rates(args.preset, vb, q_bias, args.n, args.seed)
    print(f'"{args.preset}": {{"value_base": {vb:.3f}, "q_bias": {q_bias:.3f}}}  # win={w:.4%} click|win={c:.4%}')


if __name__ == "__main__":
    main()
