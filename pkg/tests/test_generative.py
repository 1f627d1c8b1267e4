import numpy as np
import pytest

from conftest import grid_dataset
from im3f.generative import crf_prior_seating, geweke, sample_prior_state, sample_ratings
from im3f.gibbs import ModelConfig
from im3f.model import Hyperparameters
from im3f.randstats import make_rng


def test_prior_seating_follows_crp():
    g = make_rng(0)
    n = 40_000
    together = apart = 0
    for _ in range(n):
        t, _ = crf_prior_seating([0, 0, 0], 1.0, 1.0, g)
        k = len(set(t.tolist()))
        together += k == 1
        apart += k == 3
    assert together / n == pytest.approx(1 / 3, abs=0.01)
    assert apart / n == pytest.approx(1 / 6, abs=0.01)


def test_prior_seating_shares_dishes_across_restaurants():
    # two restaurants with one customer each share a dish with probability 1/(1+beta)
    g = make_rng(1)
    n = 40_000
    same = 0
    for _ in range(n):
        _, dishes = crf_prior_seating([0, 1], 1.0, 1.0, g)
        same += dishes[(0, 0)] == dishes[(1, 0)]
    assert same / n == pytest.approx(0.5, abs=0.01)


@pytest.mark.parametrize("variant", ["bpmf", "m3f", "im3f"])
def test_prior_state_is_consistent(variant):
    ds = grid_dataset()
    cfg = ModelConfig(variant, Hyperparameters(D=2, K_U=3, K_M=2), iters=1, burnin=0, likelihood="exact")
    st = sample_prior_state(ds, cfg, make_rng(2))
    st.check(ds)
    vals = sample_ratings(st, ds, make_rng(3))
    assert vals.shape == (9,) and np.all(np.isfinite(vals))


def test_geweke_smoke_bpmf():
    hp = Hyperparameters(D=2, nu0=12, W0=np.eye(2) / 12, lambda0=2, sigma2=1.0)
    rows = geweke(grid_dataset(), ModelConfig("bpmf", hp, iters=1, burnin=0), rounds=2000, seed=0)
    assert {r.name for r in rows} == {"a.b"}
    assert all(abs(r.z) < 4 for r in rows)
