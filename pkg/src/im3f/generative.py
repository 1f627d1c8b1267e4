"""Forward sampling from the model and the joint-distribution ("getting it right") test.

The prior franchise seating here is a plain sequential Chinese restaurant
process written independently of :mod:`im3f.crf`, so the Geweke comparison
does not share code with the moves it is checking.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import crf
from .gibbs import ChainState, ModelConfig, _prior_factors, gibbs_iteration, rating_dots
from .model import AssignmentState, BiasState, RatingsDataset
from .randstats import make_rng


def crf_prior_seating(cust_rest, gamma, beta, rng):
    """Sequential franchise draw.

    Returns (table label per customer, {(restaurant, table): dish}); dish
    labels are 0..K-1 in order of creation.
    """
    tables = {}
    dish_tables = []
    table_of = np.empty(len(cust_rest), dtype=np.int64)
    dish_of = {}
    for r, rest in enumerate(cust_rest):
        rest = int(rest)
        counts = tables.setdefault(rest, [])
        w = np.array(counts + [gamma], dtype=float)
        t = int(rng.choice(w.size, p=w / w.sum()))
        if t == len(counts):
            wd = np.array(dish_tables + [beta], dtype=float)
            k = int(rng.choice(wd.size, p=wd / wd.sum()))
            if k == len(dish_tables):
                dish_tables.append(0)
            dish_tables[k] += 1
            counts.append(0)
            dish_of[(rest, t)] = k
        counts[t] += 1
        table_of[r] = t
    return table_of, dish_of


def sample_prior_state(dataset: RatingsDataset, config: ModelConfig, rng) -> ChainState:
    """Every latent variable of the model drawn from its prior."""
    hp = config.hp
    factors = _prior_factors(dataset, hp, rng)
    state = ChainState(config.variant, hp, config.likelihood, factors, rng)
    U, M = dataset.num_users, dataset.num_items
    sd = np.sqrt(hp.sigma0_2)
    if config.variant == "bpmf":
        state.biases = BiasState(np.zeros((U, 0)), np.zeros((M, 0)))
    elif config.variant == "m3f":
        N = dataset.num_ratings
        th_u = rng.dirichlet(np.full(hp.K_U, hp.alpha / hp.K_U), size=U)
        th_m = rng.dirichlet(np.full(hp.K_M, hp.alpha / hp.K_M), size=M)
        z_U = np.array([rng.choice(hp.K_U, p=th_u[u]) for u in dataset.users], dtype=np.int64).reshape(N)
        z_M = np.array([rng.choice(hp.K_M, p=th_m[j]) for j in dataset.items], dtype=np.int64).reshape(N)
        state.assignments = AssignmentState.from_assignments(dataset, z_U, z_M, hp.K_U, hp.K_M)
        state.biases = BiasState(
            hp.c0 + sd * rng.standard_normal((U, hp.K_M)), hp.d0 + sd * rng.standard_normal((M, hp.K_U))
        )
    else:
        fu = crf.Franchise.for_users(dataset, hp, config.likelihood)
        fm = crf.Franchise.for_items(dataset, hp, config.likelihood)
        for fr, rests, prior_mean in ((fu, dataset.users, hp.d0), (fm, dataset.items, hp.c0)):
            table_of, dish_of = crf_prior_seating(rests, hp.gamma, hp.beta, rng)
            fr.load_seating(table_of, dish_of)
            K = fr.dish_count()
            fr.bias[:, :K] = prior_mean + sd * rng.standard_normal((fr.n_other, K))
        state.user_fr, state.item_fr = fu, fm
        # stored residuals are refreshed at the start of every topic step
    return state


def sample_ratings(state: ChainState, dataset: RatingsDataset, rng) -> np.ndarray:
    """Ratings drawn from the likelihood given every latent variable."""
    hp = state.hp
    mean = hp.chi0 + rating_dots(state.factors, dataset)
    if state.variant != "bpmf":
        z_U, z_M = state.z()
        b = state.bias
        mean = mean + b.c[dataset.users, z_M] + b.d[dataset.items, z_U]
    return mean + np.sqrt(hp.sigma2) * rng.standard_normal(dataset.num_ratings)


def default_statistics(state: ChainState, dataset: RatingsDataset, values) -> dict:
    """Mean contextual biases, mean factor score and topic counts."""
    dots = rating_dots(state.factors, dataset)
    out = {"a.b": float(dots.mean())}
    if state.variant != "bpmf":
        z_U, z_M = state.z()
        b = state.bias
        out["c"] = float(b.c[dataset.users, z_M].mean())
        out["d"] = float(b.d[dataset.items, z_U].mean())
        ku, km = state.topic_counts()
        out["K_U"] = float(ku)
        out["K_M"] = float(km)
    return out


def extended_statistics(state: ChainState, dataset: RatingsDataset, values) -> dict:
    """:func:`default_statistics` plus single entries, hyperparameters and data cross terms."""
    out = default_statistics(state, dataset, values)
    dots = rating_dots(state.factors, dataset)
    out["a.b[0]"] = float(dots[0])
    out["Lambda_U[0,0]"] = float(state.factors.Lambda_U[0, 0])
    out["mu_M[0]"] = float(state.factors.mu_M[0])
    out["r[0]"] = float(values[0])
    if state.variant != "bpmf":
        z_U, z_M = state.z()
        b = state.bias
        c_r = b.c[dataset.users, z_M]
        d_r = b.d[dataset.items, z_U]
        out["c[0]"] = float(c_r[0])
        out["d[0]"] = float(d_r[0])
        out["c*r"] = float(np.mean(c_r * values))
        out["d*r"] = float(np.mean(d_r * values))
        out["same_user_topic(0,1)"] = float(z_U[0] == z_U[1]) if len(z_U) > 1 else 0.0
    return out


@dataclass
class GewekeRow:
    name: str
    moment: str
    marginal: float
    successive: float
    z: float

    @property
    def passed(self) -> bool:
        return abs(self.z) < 3.0


def _batch_se(x, n_batches=20):
    x = np.asarray(x, dtype=float)
    b = len(x) // n_batches
    means = x[: b * n_batches].reshape(n_batches, b).mean(axis=1)
    return means.std(ddof=1) / np.sqrt(n_batches)


def geweke(dataset: RatingsDataset, config: ModelConfig, rounds: int = 20000, seed: int = 0,
           statistics=default_statistics, thin: int = 1):
    """Compare marginal-conditional and successive-conditional draws of the joint.

    Marginal-conditional: latents from the prior, data given latents.
    Successive-conditional: alternate one Gibbs iteration with a fresh draw
    of the data.  Both first and second moments of every statistic are
    compared with a z-score; the successive chain's standard error uses
    batch means.
    """
    rng_mc = make_rng(seed, 1)
    mc = []
    for _ in range(rounds):
        st = sample_prior_state(dataset, config, rng_mc)
        vals = sample_ratings(st, dataset, rng_mc)
        mc.append(statistics(st, dataset, vals))
    rng_sc = make_rng(seed, 2)
    st = sample_prior_state(dataset, config, rng_sc)
    vals = sample_ratings(st, dataset, rng_sc)
    sc = []
    for i in range(rounds * thin):
        data = dataset.with_values(vals)
        gibbs_iteration(st, data)
        vals = sample_ratings(st, dataset, st.rng)
        if (i + 1) % thin == 0:
            sc.append(statistics(st, dataset, vals))
    rows = []
    for name in mc[0]:
        a = np.array([s[name] for s in mc])
        b = np.array([s[name] for s in sc])
        for moment, fa, fb in (("mean", a, b), ("second", a * a, b * b)):
            se = np.sqrt(fa.var(ddof=1) / len(fa) + _batch_se(fb) ** 2)
            diff = fa.mean() - fb.mean()
            z = 0.0 if se == 0 and diff == 0 else diff / se if se > 0 else np.inf
            rows.append(GewekeRow(name, moment, float(fa.mean()), float(fb.mean()), float(z)))
    return rows
