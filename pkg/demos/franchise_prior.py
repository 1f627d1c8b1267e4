#!/usr/bin/env python
"""How the two concentrations shape a franchise before any data arrives.

Fifty restaurants with twenty customers each are seated by the sequential
franchise process.  Raising gamma opens more tables per restaurant; raising
beta lets those tables order new dishes instead of popular ones.  The dish
count is what the iM3F sampler reports as K.
"""
import numpy as np

from im3f.generative import crf_prior_seating
from im3f.randstats import make_rng

N_REST, PER_REST, DRAWS = 50, 20, 200


def summarize(gamma, beta, rng):
    cust_rest = np.repeat(np.arange(N_REST), PER_REST)
    tables, dishes = [], []
    for _ in range(DRAWS):
        table_of, dish_of = crf_prior_seating(cust_rest, gamma, beta, rng)
        tables.append(len(dish_of))
        dishes.append(len(set(dish_of.values())))
    return np.mean(tables) / N_REST, np.mean(dishes)


def main():
    rng = make_rng(0)
    print(f"{N_REST} restaurants x {PER_REST} customers, {DRAWS} prior draws per row\n")
    print(f"{'gamma':>6} {'beta':>6} {'tables/rest':>12} {'dishes':>8}")
    for gamma in (0.1, 1.0):
        for beta in (0.01, 0.1, 1.0, 10.0):
            t, d = summarize(gamma, beta, rng)
            print(f"{gamma:6g} {beta:6g} {t:12.2f} {d:8.2f}")
    # A single customer per restaurant makes the dish law a plain CRP in beta,
    # so two restaurants share a dish with probability 1 / (1 + beta).
    same = np.mean([d[(0, 0)] == d[(1, 0)] for _, d in
                    (crf_prior_seating([0, 1], 1.0, 1.0, rng) for _ in range(20000))])
    print(f"\ntwo lone customers share a dish: {same:.3f} (exact 0.5 at beta=1)")


if __name__ == "__main__":
    main()
