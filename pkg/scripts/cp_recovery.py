"""Success rates of dense CP recovery and 60%-observed completion.

    python scripts/cp_recovery.py [--trials 100] [--completion-trials 50]
"""

import argparse

import numpy as np

from tesseract.cp_decomp import AlsConfig, ObservedEntries, als_decompose, complete_from_samples
from tesseract.tensor_core import cp_reconstruct, random_cp


def recovery(trials, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(trials):
        k, n = int(rng.integers(1, 4)), int(rng.integers(2, 5))
        shape = tuple(int(d) for d in rng.integers(2, 9, size=n))
        t = cp_reconstruct(random_cp(shape, k, rng))
        _, res = als_decompose(t, AlsConfig(rank=k, restarts=5, max_sweeps=500, seed=i))
        rows.append((shape, k, res))
    return rows


def completion(trials, observed=0.6):
    out = []
    for i in range(trials):
        rng = np.random.default_rng(1000 + i)
        t = cp_reconstruct(random_cp((6, 6, 6), 2, rng))
        mask = rng.random(t.shape) < observed
        fit = complete_from_samples(ObservedEntries.from_dense(t, mask), t.shape,
                                    AlsConfig(rank=2, restarts=5, max_sweeps=2000, tol=1e-12,
                                              seed=i))
        out.append(float(np.sqrt(np.mean((cp_reconstruct(fit)[~mask] - t[~mask]) ** 2))))
    return out


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--completion-trials", type=int, default=50)
    args = p.parse_args()
    rows = recovery(args.trials)
    ok = sum(res < 1e-5 for *_, res in rows)
    print(f"dense recovery: {ok}/{len(rows)} below 1e-5")
    for shape, k, res in rows:
        if res >= 1e-5:
            print(f"  miss: shape {shape} rank {k} residual {res:.2e}")
    rmse = completion(args.completion_trials)
    good = sum(r < 1e-3 for r in rmse)
    print(f"completion: {good}/{len(rmse)} held-out RMSE below 1e-3, "
          f"median {np.median(rmse):.2e}")


if __name__ == "__main__":
    main()
