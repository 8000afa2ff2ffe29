"""Seed sweep: the LSTM - logreg AUROC gap at one strength across master seeds.

    python3 scripts/seed_sweep.py --strength 0 --seeds 1 2 3 4 5
"""
import argparse
import logging

import numpy as np

from planted_signal import run_one


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--strength", type=float, default=0.0)
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    ap.add_argument("--n-pos", type=int, default=1000)
    ap.add_argument("--n-neg", type=int, default=4500)
    ap.add_argument("--parts", type=int, default=10)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    gaps = []
    for seed in args.seeds:
        args.seed = seed
        _, auc = run_one(f"{args.out}/seed{seed}", args.strength, args, importance=False)
        gaps.append(auc["lstm"] - auc["logreg"])
        print(f"seed {seed:>4}: lstm {auc['lstm']:.4f} logreg {auc['logreg']:.4f} "
              f"gap {gaps[-1]:+.4f}")
    print(f"gap mean {np.mean(gaps):+.4f} sd {np.std(gaps, ddof=1) if len(gaps) > 1 else 0:.4f}")


if __name__ == "__main__":
    main()
