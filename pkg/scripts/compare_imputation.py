"""Imputation comparison on correlated Gaussian data with values masked at random.

Prints RMSE on the masked cells for every method, per seed and on average.

    python3 scripts/compare_imputation.py --r 0.8 --frac 0.1 --seeds 5
"""
import argparse

import numpy as np

from oudrisk.impute import METHODS, impute


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--r", type=float, default=0.8, help="pairwise correlation")
    ap.add_argument("--frac", type=float, default=0.1, help="fraction of cells masked")
    ap.add_argument("--n", type=int, default=400)
    ap.add_argument("--d", type=int, default=4)
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()

    cov = np.full((args.d, args.d), args.r) + (1 - args.r) * np.eye(args.d)
    table = {m: [] for m in METHODS}
    for seed in range(args.seeds):
        rng = np.random.default_rng(seed)
        X = rng.multivariate_normal(np.zeros(args.d), cov, size=args.n)
        mask = rng.random(X.shape) < args.frac
        mask[mask.all(axis=1), 0] = False
        Xm = np.where(mask, np.nan, X)
        for m in METHODS:
            out, _ = impute(Xm, m)
            table[m].append(float(np.sqrt(np.mean((out[mask] - X[mask]) ** 2))))
    print("method  " + "  ".join(f"seed{s}" for s in range(args.seeds)) + "    mean")
    for m, errs in table.items():
        print(f"{m:<7} " + "  ".join(f"{e:5.3f}" for e in errs) + f"  {np.mean(errs):6.3f}")


if __name__ == "__main__":
    main()
