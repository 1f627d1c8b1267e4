"""Gibbs samplers for the three model variants.

One iteration runs, in order: Gaussian-Wishart hyperparameters, user then
item factors, user then item biases, and the topic step (collapsed
Dirichlet-multinomial for ``m3f``, the franchise table/dish moves for
``im3f``; ``bpmf`` has no biases and no topics).
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import linalg

from . import crf
from .model import VARIANTS, AssignmentState, BiasState, FactorState, Hyperparameters, RatingsDataset
from .randstats import (
    SamplerError,
    _chol_solve_sample,
    _gauss_ll,
    _sample_log_weights,
    make_rng,
    mvn_sample,
    wishart_sample,
)

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    variant: str = "im3f"
    hp: Hyperparameters = field(default_factory=Hyperparameters)
    iters: int = 100
    burnin: int | None = None
    seed: int = 0
    likelihood: str = "map"
    clamp: tuple[float, float] | None = None
    chain_id: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.likelihood not in crf.LIKELIHOODS:
            raise ValueError(f"unknown likelihood mode {self.likelihood!r}")
        if self.burnin is None:
            self.burnin = self.iters // 5
        if not 0 <= self.burnin < max(self.iters, 1):
            raise ValueError(f"burnin ({self.burnin}) must be in [0, iters={self.iters})")


@dataclass
class PredictionAccumulator:
    """Running sums of post-burn-in predictions for a fixed list of pairs."""

    total: np.ndarray
    count: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), 0)

    def add(self, preds):
        self.total += preds
        self.count += 1

    def mean(self):
        return self.total / self.count


@dataclass
class ChainState:
    variant: str
    hp: Hyperparameters
    likelihood: str
    factors: FactorState
    rng: np.random.Generator
    iteration: int = 0
    biases: BiasState | None = None
    assignments: AssignmentState | None = None
    user_fr: crf.Franchise | None = None
    item_fr: crf.Franchise | None = None
    accumulators: dict = field(default_factory=dict)

    @property
    def bias(self) -> BiasState:
        """c (U x K_item) and d (M x K_user); views into the franchises for im3f."""
        if self.variant == "im3f":
            Ku, Km = self.user_fr.dish_count(), self.item_fr.dish_count()
            return BiasState(self.item_fr.bias[:, :Km], self.user_fr.bias[:, :Ku])
        return self.biases

    def topic_counts(self) -> tuple[int, int]:
        if self.variant == "im3f":
            return self.user_fr.dish_count(), self.item_fr.dish_count()
        if self.variant == "m3f":
            return self.hp.K_U, self.hp.K_M
        return 0, 0

    def z(self):
        """Per-rating (user topic, item topic) column indices into d and c."""
        if self.variant == "im3f":
            return self.user_fr.dish_assignments(), self.item_fr.dish_assignments()
        if self.variant == "m3f":
            return self.assignments.z_U, self.assignments.z_M
        return None, None

    def check(self, dataset: RatingsDataset):
        self.factors.check()
        if self.variant == "im3f":
            for fr in (self.user_fr, self.item_fr):
                fr.check()
                if fr.seated() != dataset.num_ratings:
                    raise AssertionError("not every rating is seated")
                if fr.n_used != fr.dish_count():
                    raise AssertionError("dead dish columns survived the iteration boundary")
            Ku, Km = self.topic_counts()
            self.bias.check(k_item=Km, k_user=Ku)
        elif self.variant == "m3f":
            self.assignments.check(dataset)
            self.bias.check(k_item=self.hp.K_M, k_user=self.hp.K_U)
        else:
            if self.biases.c.size or self.biases.d.size:
                raise AssertionError("bpmf carries no biases")


# ---------------------------------------------------------------------------
# hyperparameters and factors


def _normal_wishart_draw(X, hp: Hyperparameters, rng):
    n = X.shape[0]
    W0_inv = np.linalg.inv(hp.W0)
    if n:
        xbar = X.mean(axis=0)
        Xc = X - xbar
        S = Xc.T @ Xc
        dm = hp.mu0 - xbar
        scale_inv = W0_inv + S + (hp.lambda0 * n / (hp.lambda0 + n)) * np.outer(dm, dm)
        xsum = X.sum(axis=0)
    else:
        scale_inv = W0_inv
        xsum = np.zeros(hp.D)
    scale_inv = 0.5 * (scale_inv + scale_inv.T)
    try:
        scale = np.linalg.inv(scale_inv)
        Lam = wishart_sample(rng, 0.5 * (scale + scale.T), hp.nu0 + n)
    except np.linalg.LinAlgError as err:
        raise SamplerError(
            f"hyperparameter step: posterior Wishart scale is not SPD (cond={np.linalg.cond(scale_inv):.3g})"
        ) from err
    mean = (hp.lambda0 * hp.mu0 + xsum) / (hp.lambda0 + n)
    mu = mvn_sample(rng, mean, Lam * (hp.lambda0 + n))
    return Lam, mu


def update_hyper(factors: FactorState, dataset: RatingsDataset, hp: Hyperparameters, rng):
    """Draw (Lambda_U, mu_U) given the user factors, then (Lambda_M, mu_M) given the item factors."""
    Lam_U, mu_U = _normal_wishart_draw(factors.A, hp, rng)
    Lam_M, mu_M = _normal_wishart_draw(factors.B, hp, rng)
    factors.Lambda_U, factors.mu_U, factors.Lambda_M, factors.mu_M = Lam_U, mu_U, Lam_M, mu_M
    return Lam_U, mu_U, Lam_M, mu_M


@numba.njit(cache=True)
def _factor_sweep(g, X, Y, ptr, idx, other, targets, Lam, Lam_mu, inv_s2):
    D = X.shape[1]
    P = np.empty((D, D))
    h = np.empty(D)
    for e in range(X.shape[0]):
        for a in range(D):
            h[a] = Lam_mu[a]
            for b in range(a + 1):
                P[a, b] = Lam[a, b]
        for p in range(ptr[e], ptr[e + 1]):
            r = idx[p]
            o = other[r]
            t = targets[r] * inv_s2
            for a in range(D):
                ya = Y[o, a]
                h[a] += ya * t
                ya *= inv_s2
                for b in range(a + 1):
                    P[a, b] += ya * Y[o, b]
        if not _chol_solve_sample(g, P, h, X[e]):
            return e
    return -1


def update_factors(factors: FactorState, targets, dataset: RatingsDataset, hp: Hyperparameters, rng):
    """Redraw every a_u, then every b_j given the new a_u.

    ``targets[r]`` is rating r minus the global and both contextual biases.
    """
    targets = np.ascontiguousarray(targets, dtype=np.float64)
    inv_s2 = 1.0 / hp.sigma2
    for name, X, Y, ptr, idx, other, Lam, mu in (
        ("user", factors.A, factors.B, dataset.user_ptr, dataset.user_idx, dataset.items,
         factors.Lambda_U, factors.mu_U),
        ("item", factors.B, factors.A, dataset.item_ptr, dataset.item_idx, dataset.users,
         factors.Lambda_M, factors.mu_M),
    ):
        bad = _factor_sweep(rng, X, Y, ptr, idx, other, targets, Lam, Lam @ mu, inv_s2)
        if bad >= 0:
            raise SamplerError(f"factor step: posterior precision of {name} {bad} is not SPD")
    return factors.A, factors.B


def rating_dots(factors: FactorState, dataset: RatingsDataset) -> np.ndarray:
    return np.einsum("ij,ij->i", factors.A[dataset.users], factors.B[dataset.items])


# ---------------------------------------------------------------------------
# biases


def _bias_draw(bias, rows, z, targets, prior_mean, hp, rng):
    n_rows, K = bias.shape
    if K == 0:
        return bias
    key = rows * K + z
    cnt = np.bincount(key, minlength=n_rows * K).reshape(n_rows, K)
    tot = np.bincount(key, weights=targets, minlength=n_rows * K).reshape(n_rows, K)
    var = 1.0 / (1.0 / hp.sigma0_2 + cnt / hp.sigma2)
    mean = var * (prior_mean / hp.sigma0_2 + tot / hp.sigma2)
    bias[...] = mean + np.sqrt(var) * rng.standard_normal((n_rows, K))
    return bias


def update_user_biases(c, z_M, d_rating, dots, dataset: RatingsDataset, hp: Hyperparameters, rng):
    """Redraw c[u, k] for every user and live item topic.

    ``d_rating[r]`` is the item bias currently applied to rating r and
    ``z_M[r]`` the column of ``c`` it uses.
    """
    t = dataset.values - hp.chi0 - d_rating - dots
    return _bias_draw(c, dataset.users, z_M, t, hp.c0, hp, rng)


def update_item_biases(d, z_U, c_rating, dots, dataset: RatingsDataset, hp: Hyperparameters, rng):
    """Redraw d[j, i] for every item and live user topic (mirror of the user side)."""
    t = dataset.values - hp.chi0 - c_rating - dots
    return _bias_draw(d, dataset.items, z_U, t, hp.d0, hp, rng)


def _rating_bias(state: ChainState, dataset: RatingsDataset):
    if state.variant == "bpmf":
        z = np.zeros(dataset.num_ratings)
        return z, z
    z_U, z_M = state.z()
    b = state.bias
    return b.c[dataset.users, z_M], b.d[dataset.items, z_U]


# ---------------------------------------------------------------------------
# topics


@numba.njit(cache=True)
def _m3f_topic_sweep(g, users, items, vals, dots, chi0, sigma2, alpha, zU, zM, n_user, n_item, c, d, w, init):
    KU = n_user.shape[1]
    KM = n_item.shape[1]
    for r in range(vals.shape[0]):
        u = users[r]
        j = items[r]
        base = vals[r] - chi0 - dots[r]
        if not init:
            n_user[u, zU[r]] -= 1
        # at init every column of c holds the prior mean
        cu = c[u, zM[r]] if not init else c[u, 0]
        x = base - cu
        for i in range(KU):
            w[i] = math.log(n_user[u, i] + alpha / KU) + _gauss_ll(x, d[j, i], sigma2)
        i = _sample_log_weights(g, w, KU)
        if i < 0:
            return r
        zU[r] = i
        n_user[u, i] += 1
        if not init:
            n_item[j, zM[r]] -= 1
        x = base - d[j, i]
        for k in range(KM):
            w[k] = math.log(n_item[j, k] + alpha / KM) + _gauss_ll(x, c[u, k], sigma2)
        k = _sample_log_weights(g, w, KM)
        if k < 0:
            return r
        zM[r] = k
        n_item[j, k] += 1
    return -1


def update_topics_m3f(assignments: AssignmentState, bias: BiasState, dots, dataset, hp, rng, init=False):
    """Collapsed redraw of every (z_U, z_M) with symmetric Dirichlet(alpha/K) proportions."""
    w = np.empty(max(hp.K_U, hp.K_M))
    bad = _m3f_topic_sweep(
        rng, dataset.users, dataset.items, dataset.values, dots, hp.chi0, hp.sigma2, hp.alpha,
        assignments.z_U, assignments.z_M, assignments.n_user, assignments.n_item, bias.c, bias.d, w, init,
    )
    if bad >= 0:
        raise SamplerError(f"m3f topic step: degenerate weights at rating {bad}")
    return assignments


def _chunk(fr_u, fr_m):
    widest = max(fr_u.n_other, fr_m.n_other, 1)
    return int(max(16, min(4096, (1 << 22) // widest)))


def update_topics_im3f(user_fr: crf.Franchise, item_fr: crf.Franchise, dots, dataset: RatingsDataset, hp, rng):
    """Table step for every rating (user side then item side), then a dish step per restaurant.

    Residuals seen by one franchise subtract the other franchise's current
    bias for the rating; new dishes get a bias column on creation and dead
    ones are dropped at the end.
    """
    vals = dataset.values
    chi0 = hp.chi0
    dots = np.ascontiguousarray(dots, dtype=np.float64)
    crf._refresh_residuals(user_fr.arrays, item_fr.arrays, vals, dots, chi0)
    crf._refresh_residuals(item_fr.arrays, user_fr.arrays, vals, dots, chi0)
    N = dataset.num_ratings
    CH = _chunk(user_fr, item_fr)
    widest_rest = int(max(np.diff(user_fr.arrays.rest_ptr).max(initial=0), np.diff(item_fr.arrays.rest_ptr).max(initial=0)))
    w = np.empty(widest_rest + 2)
    for lo in range(0, N, CH):
        hi = min(N, lo + CH)
        user_fr.ensure_capacity(hi - lo)
        item_fr.ensure_capacity(hi - lo)
        cap = max(user_fr.capacity, item_fr.capacity) + 2
        fk, wd = np.empty(cap), np.empty(cap)
        bad = crf._customer_sweep(user_fr.arrays, item_fr.arrays, rng, lo, hi, vals, dots, chi0, w, fk, wd)
        if bad >= 0:
            raise SamplerError(f"im3f table step: degenerate weights at rating {bad}")
    members = np.empty(N, dtype=np.int64)
    offs = np.empty(widest_rest + 2, dtype=np.int64)
    xs = np.empty(widest_rest + 1)
    for F, P in ((user_fr, item_fr), (item_fr, user_fr)):
        ntab = F.arrays.rest_ntab
        rlo = 0
        while rlo < F.n_restaurants:
            rhi, need = rlo, 0
            while rhi < F.n_restaurants and (rhi == rlo or need + ntab[rhi] <= CH):
                need += int(ntab[rhi])
                rhi += 1
            F.ensure_capacity(need)
            wd = np.empty(F.capacity + 2)
            bad = crf._dish_sweep(F.arrays, P.arrays, rng, rlo, rhi, vals, dots, chi0, members, offs, xs, wd, True)
            if bad >= 0:
                raise SamplerError(f"im3f dish step: degenerate weights in restaurant {bad}")
            rlo = rhi
    user_fr.compact()
    item_fr.compact()


# ---------------------------------------------------------------------------
# initialisation and iteration


def _prior_factors(dataset: RatingsDataset, hp: Hyperparameters, rng) -> FactorState:
    Lam_U = wishart_sample(rng, hp.W0, hp.nu0)
    mu_U = mvn_sample(rng, hp.mu0, hp.lambda0 * Lam_U)
    Lam_M = wishart_sample(rng, hp.W0, hp.nu0)
    mu_M = mvn_sample(rng, hp.mu0, hp.lambda0 * Lam_M)
    A = _mvn_rows(rng, mu_U, Lam_U, dataset.num_users)
    B = _mvn_rows(rng, mu_M, Lam_M, dataset.num_items)
    return FactorState(Lam_U, Lam_M, mu_U, mu_M, A, B)


def _mvn_rows(rng, mean, precision, n):
    L = np.linalg.cholesky(precision)
    Z = rng.standard_normal((mean.size, n))
    return np.ascontiguousarray((mean[:, None] + linalg.solve_triangular(L, Z, lower=True, trans="T")).T)


def init_state(dataset: RatingsDataset, config: ModelConfig, rng=None) -> ChainState:
    """Hyperparameters and factors from the prior, biases at their prior means, topics seated once."""
    hp = config.hp
    rng = make_rng(config.seed, config.chain_id) if rng is None else rng
    factors = _prior_factors(dataset, hp, rng)
    state = ChainState(config.variant, hp, config.likelihood, factors, rng)
    U, M = dataset.num_users, dataset.num_items
    dots = rating_dots(factors, dataset)
    if config.variant == "bpmf":
        state.biases = BiasState(np.zeros((U, 0)), np.zeros((M, 0)))
    elif config.variant == "m3f":
        state.biases = BiasState(np.full((U, hp.K_M), hp.c0), np.full((M, hp.K_U), hp.d0))
        N = dataset.num_ratings
        state.assignments = AssignmentState(
            np.zeros(N, dtype=np.int64), np.zeros(N, dtype=np.int64),
            np.zeros((U, hp.K_U), dtype=np.int64), np.zeros((M, hp.K_M), dtype=np.int64),
        )
        update_topics_m3f(state.assignments, state.biases, dots, dataset, hp, rng, init=True)
    else:
        state.user_fr = crf.Franchise.for_users(dataset, hp, config.likelihood)
        state.item_fr = crf.Franchise.for_items(dataset, hp, config.likelihood)
        update_topics_im3f(state.user_fr, state.item_fr, dots, dataset, hp, rng)
    return state


def gibbs_iteration(state: ChainState, dataset: RatingsDataset) -> ChainState:
    hp, rng = state.hp, state.rng
    update_hyper(state.factors, dataset, hp, rng)
    c_r, d_r = _rating_bias(state, dataset)
    update_factors(state.factors, dataset.values - hp.chi0 - c_r - d_r, dataset, hp, rng)
    dots = rating_dots(state.factors, dataset)
    if state.variant != "bpmf":
        z_U, z_M = state.z()
        b = state.bias
        update_user_biases(b.c, z_M, d_r, dots, dataset, hp, rng)
        c_r = b.c[dataset.users, z_M]
        update_item_biases(b.d, z_U, c_r, dots, dataset, hp, rng)
        if state.variant == "m3f":
            update_topics_m3f(state.assignments, state.biases, dots, dataset, hp, rng)
        else:
            update_topics_im3f(state.user_fr, state.item_fr, dots, dataset, hp, rng)
    state.iteration += 1
    return state


# ---------------------------------------------------------------------------
# prediction


@numba.njit(cache=True)
def _predict_im3f(Fu, Fm, us, js, c_weighted, d_weighted, out):
    for p in range(us.shape[0]):
        u = us[p]
        j = js[p]
        out[p] += crf._expected_bias(Fm, j, u, c_weighted[u], Fm.bias)
        out[p] += crf._expected_bias(Fu, u, j, d_weighted[j], Fu.bias)


def _weighted_bias(fr: crf.Franchise):
    slots = fr.live_slots()
    M = fr.arrays.dish_m[slots].astype(float)
    return fr.bias[:, slots] @ M + fr.beta * fr.arrays.lik[crf.PRIOR_MEAN]


def predict_pairs(state: ChainState, users, items, clamp=None) -> np.ndarray:
    """Per-sample prediction for each (user, item) pair.

    The contextual bias is averaged over the predictive topic law of the
    pair: the item's restaurant for c and the user's restaurant for d
    (Dirichlet-multinomial predictive for ``m3f``).
    """
    users = np.ascontiguousarray(users, dtype=np.int64)
    items = np.ascontiguousarray(items, dtype=np.int64)
    f = state.factors
    out = state.hp.chi0 + np.einsum("ij,ij->i", f.A[users], f.B[items])
    if state.variant == "im3f":
        _predict_im3f(
            state.user_fr.arrays, state.item_fr.arrays, users, items,
            _weighted_bias(state.item_fr), _weighted_bias(state.user_fr), out,
        )
    elif state.variant == "m3f":
        a, hp, b = state.assignments, state.hp, state.biases
        pu = (a.n_user + hp.alpha / hp.K_U) / (a.n_user.sum(1, keepdims=True) + hp.alpha)
        pj = (a.n_item + hp.alpha / hp.K_M) / (a.n_item.sum(1, keepdims=True) + hp.alpha)
        out += np.einsum("ik,ik->i", pj[items], b.c[users])
        out += np.einsum("ik,ik->i", pu[users], b.d[items])
    if clamp is not None:
        np.clip(out, clamp[0], clamp[1], out=out)
    return out


def predict(state: ChainState, u: int, j: int, clamp=None) -> float:
    return float(predict_pairs(state, [u], [j], clamp)[0])


def evaluate(predictions, truths) -> float:
    """Root mean squared error."""
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(truths, dtype=float)
    if p.size == 0 or p.shape != t.shape:
        raise ValueError("evaluate needs equal-length, non-empty vectors")
    return float(np.sqrt(np.mean((p - t) ** 2)))


# ---------------------------------------------------------------------------
# driver


@dataclass
class MetricsRecord:
    iter: int
    train_rmse: float
    test_rmse: float
    k_user: int
    k_item: int
    seconds: float


def _score(state, key, data, config, preds):
    acc = state.accumulators.get(key)
    if acc is None:
        acc = state.accumulators[key] = PredictionAccumulator.zeros(len(preds))
    if state.iteration > config.burnin:
        acc.add(preds)
    use = acc.mean() if acc.count else preds
    if config.clamp is not None:
        use = np.clip(use, *config.clamp)
    return evaluate(use, data.values) if len(data) else float("nan")


def run_chain(train: RatingsDataset, config: ModelConfig, test: RatingsDataset | None = None,
              state: ChainState | None = None, callback=None, timer=time.perf_counter):
    """Run (or continue) a chain up to ``config.iters`` iterations.

    Returns the final state and one :class:`MetricsRecord` per iteration run.
    ``callback(state, record)`` is called after every iteration.
    """
    start = timer()
    if state is None:
        state = init_state(train, config)
    records = []
    while state.iteration < config.iters:
        gibbs_iteration(state, train)
        tr = _score(state, "train", train, config, predict_pairs(state, train.users, train.items))
        if test is not None and len(test):
            te = _score(state, "test", test, config, predict_pairs(state, test.users, test.items))
        else:
            te = float("nan")
        ku, km = state.topic_counts()
        rec = MetricsRecord(state.iteration, tr, te, ku, km, timer() - start)
        records.append(rec)
        log.info("iter %d train %.4f test %.4f K_U %d K_M %d", rec.iter, tr, te, ku, km)
        if callback is not None:
            callback(state, rec)
    return state, records
