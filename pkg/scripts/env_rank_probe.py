"""Payoff structure of tensor games as the generating rank grows.

Prints, per rank, how close the game is to rank one (relative residual of
the best rank-1 fit) and how far the best entry stands above the mean.

    python scripts/env_rank_probe.py [--seeds 5]
"""

import argparse

import numpy as np

from tesseract.cp_decomp import AlsConfig, als_decompose
from tesseract.mmdp import generate_tensor_game


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--ranks", type=int, nargs="+", default=[8, 32, 128])
    args = p.parse_args()
    for r in args.ranks:
        res, gap = [], []
        for seed in range(args.seeds):
            g = generate_tensor_game(5, 10, r, seed, allow_dependent=r > 10)
            res.append(als_decompose(g.payoff, AlsConfig(rank=1, seed=seed))[1])
            gap.append(1.0 - g.payoff.mean())
        print(f"rank {r:>4}: rank-1 residual {np.median(res):.3f}, "
              f"max minus mean {np.median(gap):.3f}")


if __name__ == "__main__":
    main()
