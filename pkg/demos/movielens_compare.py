#!/usr/bin/env python
"""BPMF, M3F and iM3F on one leave-one-out split of MovieLens 100k.

Prints test RMSE every ten iterations and the topic counts the
nonparametric model settles on.  Run demos/fetch_data.py first.
"""
import argparse
import time
from pathlib import Path

from im3f.dataio import load_movielens, split_leave_one_out
from im3f.gibbs import ModelConfig, run_chain
from im3f.model import Hyperparameters

DATA = Path(__file__).resolve().parents[1] / "data" / "ml-100k" / "u.data"


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", default=DATA)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--rank", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    ratings = load_movielens(args.data, "ml100k")
    train, test = split_leave_one_out(ratings, args.seed)
    print(f"{train.num_ratings} train / {test.num_ratings} test ratings")
    base = Hyperparameters(D=args.rank, chi0=train.mean_rating())
    runs = {
        "bpmf": base,
        "m3f": base.replace(K_U=2, K_M=1),
        "im3f": base.replace(gamma=0.1, beta=0.1),
    }
    for variant, hp in runs.items():
        start = time.perf_counter()

        def show(state, rec):
            if rec.iter % 10 == 0:
                print(f"  iter {rec.iter:4d}  train {rec.train_rmse:.4f}  test {rec.test_rmse:.4f}"
                      f"  K_U {rec.k_user}  K_M {rec.k_item}")

        print(f"\n{variant}")
        cfg = ModelConfig(variant, hp, iters=args.iters, seed=args.seed)
        run_chain(train, cfg, test, callback=show)
        print(f"  {time.perf_counter() - start:.0f} s")


if __name__ == "__main__":
    main()
