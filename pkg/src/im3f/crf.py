"""Chinese restaurant franchise state and its Gibbs moves.

One franchise seats every rating twice over the model: in the user-topic
franchise restaurants are users and dishes are user topics, in the
item-topic franchise restaurants are items and dishes are item topics.

Storage is flat so the sweeps can run compiled:

* Table slots of restaurant ``r`` live in ``[rest_ptr[r], rest_ptr[r+1])``;
  a restaurant can never have more tables than customers.  The first
  ``rest_ntab[r]`` entries of that window in ``rest_tabs`` are the live
  tables, the rest are free slots.
* Dishes occupy slots ``0 .. n_used``; a dish that loses its last table is
  tombstoned and its slot is only recycled by :meth:`Franchise.compact`.
  ``dish_label`` keeps a run-unique, increasing id for each dish.
* Residual sums are kept in 32.32 fixed point (``int64``) so that the
  incrementally maintained statistics equal a from-scratch recount exactly.
* ``bias`` is the dish-indexed bias table owned by the franchise
  (``d`` for user topics, ``c`` for item topics); row ``o`` belongs to the
  entity on the other side of the rating.
"""
from __future__ import annotations

import math
from collections import namedtuple

import numba
import numpy as np

from .randstats import LOG_2PI, SamplerError, _gauss_ll, _grouped_loglik_stats, _sample_log_weights

LIKELIHOODS = {"map": 0, "bayes": 1, "exact": 2, "prior": 3}
MAP, BAYES, EXACT, PRIOR = 0, 1, 2, 3

QSCALE = 2.0**32
QINV = 1.0 / QSCALE

# meta slots
N_LIVE, N_USED, NEXT_LABEL, MODE = 0, 1, 2, 3
# lik slots
SIGMA2, PRIOR_MEAN, PRIOR_VAR, GAMMA, BETA = 0, 1, 2, 3, 4

Arrays = namedtuple(
    "Arrays",
    [
        "rest_ptr", "rest_cust", "cust_rest", "cust_other", "cust_table", "cust_q",
        "tab_count", "tab_dish", "tab_pos", "rest_tabs", "rest_ntab", "rest_ncust",
        "dish_m", "dish_n", "dish_sq", "dish_label", "dish_alive", "dish_pos", "live",
        "meta", "lik", "bias",
    ],
)

_DISH_FIELDS = ("dish_m", "dish_n", "dish_sq", "dish_label", "dish_alive", "dish_pos", "live")


class BookkeepingError(AssertionError):
    pass


# ---------------------------------------------------------------------------
# compiled primitives


@numba.njit(cache=True)
def _quantize(x):
    return np.int64(round(x * QSCALE))


@numba.njit(cache=True)
def _dish_post(F, k):
    sigma2 = F.lik[SIGMA2]
    pv = F.lik[PRIOR_VAR]
    var = 1.0 / (1.0 / pv + F.dish_n[k] / sigma2)
    mean = var * (F.lik[PRIOR_MEAN] / pv + F.dish_sq[k] * QINV / sigma2)
    return mean, var


@numba.njit(cache=True)
def _cust_ll(F, k, x, other):
    mode = F.meta[MODE]
    if mode == PRIOR:
        return 0.0
    sigma2 = F.lik[SIGMA2]
    if k < 0:
        if mode == MAP:
            return _gauss_ll(x, F.lik[PRIOR_MEAN], sigma2)
        return _gauss_ll(x, F.lik[PRIOR_MEAN], sigma2 + F.lik[PRIOR_VAR])
    if mode == EXACT:
        return _gauss_ll(x, F.bias[other, k], sigma2)
    mean, var = _dish_post(F, k)
    if mode == MAP:
        return _gauss_ll(x, mean, sigma2)
    return _gauss_ll(x, mean, sigma2 + var)


@numba.njit(cache=True)
def _kill_dish(F, k):
    F.dish_alive[k] = 0
    p = F.dish_pos[k]
    last = F.meta[N_LIVE] - 1
    o = F.live[last]
    F.live[p] = o
    F.dish_pos[o] = p
    F.live[last] = k
    F.dish_pos[k] = -1
    F.meta[N_LIVE] -= 1


@numba.njit(cache=True)
def _new_dish(F, g):
    k = F.meta[N_USED]
    if k >= F.dish_m.shape[0]:
        return -2
    F.meta[N_USED] += 1
    F.dish_m[k] = 0
    F.dish_n[k] = 0
    F.dish_sq[k] = 0
    F.dish_label[k] = F.meta[NEXT_LABEL]
    F.meta[NEXT_LABEL] += 1
    F.dish_alive[k] = 1
    F.live[F.meta[N_LIVE]] = k
    F.dish_pos[k] = F.meta[N_LIVE]
    F.meta[N_LIVE] += 1
    sd = math.sqrt(F.lik[PRIOR_VAR])
    pm = F.lik[PRIOR_MEAN]
    for o in range(F.bias.shape[0]):
        F.bias[o, k] = pm + sd * g.standard_normal()
    return k


@numba.njit(cache=True)
def _draw_posterior_entry(F, g, other, x):
    # d_j^new | x under the N(prior_mean, prior_var) prior, one observation
    sigma2 = F.lik[SIGMA2]
    pv = F.lik[PRIOR_VAR]
    var = 1.0 / (1.0 / pv + 1.0 / sigma2)
    mean = var * (F.lik[PRIOR_MEAN] / pv + x / sigma2)
    return mean + math.sqrt(var) * g.standard_normal()


@numba.njit(cache=True)
def _open_table(F, rest, k):
    ptr = F.rest_ptr[rest]
    slot = F.rest_tabs[ptr + F.rest_ntab[rest]]
    F.rest_ntab[rest] += 1
    F.tab_count[slot] = 0
    F.tab_dish[slot] = k
    F.dish_m[k] += 1
    return slot


@numba.njit(cache=True)
def _close_table(F, rest, slot):
    k = F.tab_dish[slot]
    F.tab_dish[slot] = -1
    ptr = F.rest_ptr[rest]
    p = F.tab_pos[slot]
    last = ptr + F.rest_ntab[rest] - 1
    o = F.rest_tabs[last]
    F.rest_tabs[p] = o
    F.tab_pos[o] = p
    F.rest_tabs[last] = slot
    F.tab_pos[slot] = last
    F.rest_ntab[rest] -= 1
    F.dish_m[k] -= 1
    if F.dish_m[k] == 0:
        _kill_dish(F, k)


@numba.njit(cache=True)
def _seat(F, r, slot, qx):
    F.cust_table[r] = slot
    F.cust_q[r] = qx
    F.tab_count[slot] += 1
    k = F.tab_dish[slot]
    F.dish_n[k] += 1
    F.dish_sq[k] += qx
    F.rest_ncust[F.cust_rest[r]] += 1


@numba.njit(cache=True)
def _unseat(F, r):
    slot = F.cust_table[r]
    if slot < 0:
        return False
    k = F.tab_dish[slot]
    F.dish_n[k] -= 1
    F.dish_sq[k] -= F.cust_q[r]
    F.tab_count[slot] -= 1
    F.cust_table[r] = -1
    rest = F.cust_rest[r]
    F.rest_ncust[rest] -= 1
    if F.tab_count[slot] == 0:
        _close_table(F, rest, slot)
    return True


@numba.njit(cache=True)
def _table_weights(F, rest, x, other, w, fk):
    """Existing-table log weights in w[:ntab], new-table weight in w[ntab].

    fk[:n_live] receives the per-dish log likelihoods (live order) and
    fk[n_live] the new-dish one.  Returns ntab.
    """
    n_live = F.meta[N_LIVE]
    log_beta = math.log(F.lik[BETA])
    sum_m = 0.0
    fk[n_live] = _cust_ll(F, -1, x, other)
    mx = log_beta + fk[n_live]
    for i in range(n_live):
        k = F.live[i]
        fk[i] = _cust_ll(F, k, x, other)
        m = F.dish_m[k]
        sum_m += m
        t = math.log(m) + fk[i]
        if t > mx:
            mx = t
    acc = math.exp(log_beta + fk[n_live] - mx)
    for i in range(n_live):
        acc += math.exp(math.log(F.dish_m[F.live[i]]) + fk[i] - mx)
    log_mix = mx + math.log(acc) - math.log(sum_m + F.lik[BETA])
    ptr = F.rest_ptr[rest]
    ntab = F.rest_ntab[rest]
    for p in range(ntab):
        slot = F.rest_tabs[ptr + p]
        w[p] = math.log(F.tab_count[slot]) + fk[F.dish_pos[F.tab_dish[slot]]]
    w[ntab] = math.log(F.lik[GAMMA]) + log_mix
    return ntab


@numba.njit(cache=True)
def _seat_customer(F, g, r, x, qx, other, w, fk, wd):
    """Gibbs draw of the table for unseated customer r; returns the slot or < 0."""
    rest = F.cust_rest[r]
    ntab = _table_weights(F, rest, x, other, w, fk)
    p = _sample_log_weights(g, w, ntab + 1)
    if p < 0:
        return -1
    if p < ntab:
        slot = F.rest_tabs[F.rest_ptr[rest] + p]
    else:
        n_live = F.meta[N_LIVE]
        for i in range(n_live):
            wd[i] = math.log(F.dish_m[F.live[i]]) + fk[i]
        wd[n_live] = math.log(F.lik[BETA]) + fk[n_live]
        q = _sample_log_weights(g, wd, n_live + 1)
        if q < 0:
            return -1
        if q < n_live:
            k = F.live[q]
        else:
            k = _new_dish(F, g)
            if k < 0:
                return k
            if F.meta[MODE] == EXACT:
                F.bias[other, k] = _draw_posterior_entry(F, g, other, x)
        slot = _open_table(F, rest, k)
    _seat(F, r, slot, qx)
    return slot


@numba.njit(cache=True)
def _set_residual(F, r, x):
    slot = F.cust_table[r]
    if slot < 0:
        return
    qx = _quantize(x)
    F.dish_sq[F.tab_dish[slot]] += qx - F.cust_q[r]
    F.cust_q[r] = qx


@numba.njit(cache=True)
def _partner_bias(F, P, r):
    # the fixed other-side bias entering F's residual for rating r
    pslot = P.cust_table[r]
    if pslot < 0:
        return P.lik[PRIOR_MEAN]
    return P.bias[F.cust_rest[r], P.tab_dish[pslot]]


@numba.njit(cache=True)
def _resample_customer(F, P, g, r, vals, dots, chi0, w, fk, wd):
    other = F.cust_other[r]
    x = vals[r] - chi0 - _partner_bias(F, P, r) - dots[r]
    qx = _quantize(x)
    x = qx * QINV
    old = F.cust_table[r]
    old_k = F.tab_dish[old] if old >= 0 else -1
    _unseat(F, r)
    slot = _seat_customer(F, g, r, x, qx, other, w, fk, wd)
    if slot < 0:
        return slot
    k = F.tab_dish[slot]
    if k != old_k:
        _set_residual(P, r, vals[r] - chi0 - F.bias[other, k] - dots[r])
    return 0


@numba.njit(cache=True)
def _customer_sweep(Fu, Fm, g, lo, hi, vals, dots, chi0, w, fk, wd):
    """Table step over ratings lo..hi: user-topic franchise, then item-topic franchise."""
    for r in range(lo, hi):
        st = _resample_customer(Fu, Fm, g, r, vals, dots, chi0, w, fk, wd)
        if st < 0:
            return r
        st = _resample_customer(Fm, Fu, g, r, vals, dots, chi0, w, fk, wd)
        if st < 0:
            return r
    return -1


@numba.njit(cache=True)
def _group_ll(F, k, members, lo, hi, xs, n, s, ss):
    mode = F.meta[MODE]
    if mode == PRIOR:
        return 0.0
    sigma2 = F.lik[SIGMA2]
    if k < 0:
        pm = F.lik[PRIOR_MEAN]
        if mode == MAP:
            return -0.5 * n * (LOG_2PI + math.log(sigma2)) - (ss - 2.0 * pm * s + n * pm * pm) / (2.0 * sigma2)
        if mode == BAYES:
            return _grouped_loglik_stats(n, s - n * pm, ss - 2.0 * pm * s + n * pm * pm, sigma2, F.lik[PRIOR_VAR])
        tot = 0.0
        for i in range(lo, hi):
            tot += _gauss_ll(xs[i - lo], pm, sigma2 + F.lik[PRIOR_VAR])
        return tot
    if mode == EXACT:
        tot = 0.0
        for i in range(lo, hi):
            tot += _gauss_ll(xs[i - lo], F.bias[F.cust_other[members[i]], k], sigma2)
        return tot
    mean, var = _dish_post(F, k)
    if mode == MAP:
        return -0.5 * n * (LOG_2PI + math.log(sigma2)) - (ss - 2.0 * mean * s + n * mean * mean) / (2.0 * sigma2)
    return _grouped_loglik_stats(n, s - n * mean, ss - 2.0 * mean * s + n * mean * mean, sigma2, var)


@numba.njit(cache=True)
def _resample_table_dish(F, P, g, slot, members, lo, hi, xs, wd, vals, dots, chi0, propagate):
    """Dish draw for one table whose customers are members[lo:hi]."""
    n = hi - lo
    if n == 0:
        return -3
    k_old = F.tab_dish[slot]
    sq_t = np.int64(0)
    ss = 0.0
    for i in range(lo, hi):
        q = F.cust_q[members[i]]
        sq_t += q
        x = q * QINV
        xs[i - lo] = x
        ss += x * x
    s = sq_t * QINV
    # remove the table from its dish
    F.dish_n[k_old] -= n
    F.dish_sq[k_old] -= sq_t
    F.dish_m[k_old] -= 1
    if F.dish_m[k_old] == 0:
        _kill_dish(F, k_old)
    n_live = F.meta[N_LIVE]
    for i in range(n_live):
        k = F.live[i]
        wd[i] = math.log(F.dish_m[k]) + _group_ll(F, k, members, lo, hi, xs, n, s, ss)
    wd[n_live] = math.log(F.lik[BETA]) + _group_ll(F, -1, members, lo, hi, xs, n, s, ss)
    q = _sample_log_weights(g, wd, n_live + 1)
    if q < 0:
        return -1
    if q < n_live:
        k_new = F.live[q]
    else:
        k_new = _new_dish(F, g)
        if k_new < 0:
            return k_new
        if F.meta[MODE] == EXACT:
            for i in range(lo, hi):
                o = F.cust_other[members[i]]
                F.bias[o, k_new] = _draw_posterior_entry(F, g, o, xs[i - lo])
    F.dish_n[k_new] += n
    F.dish_sq[k_new] += sq_t
    F.dish_m[k_new] += 1
    F.tab_dish[slot] = k_new
    if propagate and k_new != k_old:
        for i in range(lo, hi):
            r = members[i]
            _set_residual(P, r, vals[r] - chi0 - F.bias[F.cust_other[r], k_new] - dots[r])
    return k_new


@numba.njit(cache=True)
def _group_members(F, rest, members, offs):
    """Bucket the restaurant's seated customers by table position."""
    ptr = F.rest_ptr[rest]
    ntab = F.rest_ntab[rest]
    for p in range(ntab + 1):
        offs[p] = 0
    for c in range(ptr, F.rest_ptr[rest + 1]):
        slot = F.cust_table[F.rest_cust[c]]
        if slot >= 0:
            offs[F.tab_pos[slot] - ptr + 1] += 1
    for p in range(ntab):
        offs[p + 1] += offs[p]
    fill = offs[:ntab].copy()
    for c in range(ptr, F.rest_ptr[rest + 1]):
        r = F.rest_cust[c]
        slot = F.cust_table[r]
        if slot >= 0:
            p = F.tab_pos[slot] - ptr
            members[fill[p]] = r
            fill[p] += 1
    return ntab


@numba.njit(cache=True)
def _dish_sweep(F, P, g, rlo, rhi, vals, dots, chi0, members, offs, xs, wd, propagate):
    for rest in range(rlo, rhi):
        ntab = _group_members(F, rest, members, offs)
        ptr = F.rest_ptr[rest]
        for p in range(ntab):
            slot = F.rest_tabs[ptr + p]
            st = _resample_table_dish(F, P, g, slot, members, offs[p], offs[p + 1], xs, wd, vals, dots, chi0, propagate)
            if st < 0:
                return rest
    return -1


@numba.njit(cache=True)
def _refresh_residuals(F, P, vals, dots, chi0):
    """Recompute every stored residual from the current state and rebuild dish sums."""
    n_used = F.meta[N_USED]
    for k in range(n_used):
        F.dish_n[k] = 0
        F.dish_sq[k] = 0
    for r in range(F.cust_table.shape[0]):
        slot = F.cust_table[r]
        if slot < 0:
            continue
        qx = _quantize(vals[r] - chi0 - _partner_bias(F, P, r) - dots[r])
        F.cust_q[r] = qx
        k = F.tab_dish[slot]
        F.dish_n[k] += 1
        F.dish_sq[k] += qx


@numba.njit(cache=True)
def _restaurant_dish_mass(F, rest, dish_mass):
    # dish_mass[live index] += customers of `rest` eating that dish
    ptr = F.rest_ptr[rest]
    for p in range(F.rest_ntab[rest]):
        slot = F.rest_tabs[ptr + p]
        dish_mass[F.dish_pos[F.tab_dish[slot]]] += F.tab_count[slot]


@numba.njit(cache=True)
def _expected_bias(F, rest, row, bias_row_weighted, bias):
    """E[bias[row, z]] with z drawn from the predictive dish law of restaurant ``rest``.

    ``bias_row_weighted`` is sum_k M_k * bias[row, k] + beta * prior_mean.
    """
    gamma = F.lik[GAMMA]
    beta = F.lik[BETA]
    sum_m = 0.0
    for i in range(F.meta[N_LIVE]):
        sum_m += F.dish_m[F.live[i]]
    n_r = F.rest_ncust[rest]
    ptr = F.rest_ptr[rest]
    acc = 0.0
    for p in range(F.rest_ntab[rest]):
        slot = F.rest_tabs[ptr + p]
        acc += F.tab_count[slot] * bias[row, F.tab_dish[slot]]
    acc += gamma * bias_row_weighted / (sum_m + beta)
    return acc / (n_r + gamma)


# ---------------------------------------------------------------------------


def _csr(keys, n):
    counts = np.bincount(keys, minlength=n)
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    idx = np.argsort(keys, kind="stable").astype(np.int64)
    return ptr, idx


class Franchise:
    """Chinese restaurant franchise over a fixed set of customers.

    Parameters
    ----------
    cust_rest : array of int
        Restaurant of each customer (customer ids are 0..N-1).
    n_restaurants : int
    cust_other : array of int, optional
        Row of ``bias`` that a customer's likelihood reads in ``exact`` mode.
    n_other : int
        Number of rows of the dish-indexed bias table.
    likelihood : {"map", "bayes", "exact", "prior"}
        ``map`` plugs in the posterior-mean dish parameter, ``bayes``
        integrates it out, ``exact`` uses the per-entity bias entries of the
        rating model, ``prior`` drops the likelihood altogether.
    """

    def __init__(
        self,
        cust_rest,
        n_restaurants: int,
        *,
        gamma: float,
        beta: float,
        sigma2: float = 1.0,
        prior_mean: float = 0.0,
        prior_var: float = 1.0,
        likelihood: str = "map",
        cust_other=None,
        n_other: int = 1,
        capacity: int = 16,
    ):
        cust_rest = np.ascontiguousarray(cust_rest, dtype=np.int64)
        N = cust_rest.size
        if likelihood not in LIKELIHOODS:
            raise ValueError(f"unknown likelihood mode {likelihood!r}")
        if cust_other is None:
            cust_other = np.zeros(N, dtype=np.int64)
        self.likelihood = likelihood
        self.n_restaurants = int(n_restaurants)
        self.n_other = int(n_other)
        rest_ptr, rest_cust = _csr(cust_rest, self.n_restaurants)
        slots = np.arange(N, dtype=np.int64)
        self._a = dict(
            rest_ptr=rest_ptr,
            rest_cust=rest_cust,
            cust_rest=cust_rest,
            cust_other=np.ascontiguousarray(cust_other, dtype=np.int64),
            cust_table=np.full(N, -1, dtype=np.int64),
            cust_q=np.zeros(N, dtype=np.int64),
            tab_count=np.zeros(N, dtype=np.int64),
            tab_dish=np.full(N, -1, dtype=np.int64),
            tab_pos=slots.copy(),
            rest_tabs=slots.copy(),
            rest_ntab=np.zeros(self.n_restaurants, dtype=np.int64),
            rest_ncust=np.zeros(self.n_restaurants, dtype=np.int64),
            meta=np.array([0, 0, 0, LIKELIHOODS[likelihood]], dtype=np.int64),
            lik=np.array([sigma2, prior_mean, prior_var, gamma, beta], dtype=np.float64),
        )
        self._alloc_dishes(max(int(capacity), 1))

    @classmethod
    def for_users(cls, dataset, hp, likelihood="map", capacity=16):
        """User-topic franchise: restaurants are users, dishes index columns of d."""
        return cls(
            dataset.users, dataset.num_users, cust_other=dataset.items, n_other=dataset.num_items,
            gamma=hp.gamma, beta=hp.beta, sigma2=hp.sigma2, prior_mean=hp.d0, prior_var=hp.sigma0_2,
            likelihood=likelihood, capacity=capacity,
        )

    @classmethod
    def for_items(cls, dataset, hp, likelihood="map", capacity=16):
        """Item-topic franchise: restaurants are items, dishes index columns of c."""
        return cls(
            dataset.items, dataset.num_items, cust_other=dataset.users, n_other=dataset.num_users,
            gamma=hp.gamma, beta=hp.beta, sigma2=hp.sigma2, prior_mean=hp.c0, prior_var=hp.sigma0_2,
            likelihood=likelihood, capacity=capacity,
        )

    # -- storage ------------------------------------------------------------

    def _alloc_dishes(self, cap):
        a = self._a
        old = {f: a.get(f) for f in _DISH_FIELDS}
        old_bias = a.get("bias")
        n = 0 if old["dish_m"] is None else old["dish_m"].shape[0]
        for f in _DISH_FIELDS:
            arr = np.full(cap, -1 if f in ("dish_pos", "live") else 0, dtype=np.int64)
            if n:
                arr[:n] = old[f]
            a[f] = arr
        bias = np.zeros((self.n_other, cap))
        if n:
            bias[:, :n] = old_bias
        a["bias"] = bias

    @property
    def arrays(self) -> Arrays:
        return Arrays(**self._a)

    @property
    def capacity(self) -> int:
        return self._a["dish_m"].shape[0]

    @property
    def bias(self) -> np.ndarray:
        """Dish-indexed bias table (columns are dish slots)."""
        return self._a["bias"]

    @bias.setter
    def bias(self, value):
        value = np.ascontiguousarray(value, dtype=np.float64)
        if value.shape[0] != self.n_other or value.shape[1] < self.n_used:
            raise ValueError("bias table does not match the franchise")
        if value.shape[1] < self.capacity:
            full = np.zeros((self.n_other, self.capacity))
            full[:, : value.shape[1]] = value
            value = full
        self._a["bias"] = value

    def live_bias(self) -> np.ndarray:
        """Bias columns of the live dishes, in slot order (a copy)."""
        return self._a["bias"][:, self.live_slots()].copy()

    @property
    def n_used(self) -> int:
        return int(self._a["meta"][N_USED])

    @property
    def gamma(self) -> float:
        return float(self._a["lik"][GAMMA])

    @property
    def beta(self) -> float:
        return float(self._a["lik"][BETA])

    def set_concentrations(self, gamma: float, beta: float):
        if not (gamma > 0 and beta > 0):
            raise ValueError("concentrations must be positive")
        self._a["lik"][GAMMA] = gamma
        self._a["lik"][BETA] = beta

    def ensure_capacity(self, extra: int):
        """Make room for ``extra`` new dishes, compacting first if that suffices."""
        need = self.n_used + extra
        if need <= self.capacity:
            return
        if self.dish_count() + extra <= self.capacity and self.n_used > 2 * self.dish_count():
            self.compact()
            return
        self._alloc_dishes(max(need, 2 * self.capacity))

    def compact(self) -> np.ndarray:
        """Drop tombstoned dishes; live dishes keep their order and labels.

        Returns the old slots of the surviving dishes, i.e. new slot i was old
        slot ``kept[i]``.
        """
        a = self._a
        kept = self.live_slots()
        K = kept.size
        remap = np.full(max(self.capacity, 1), -1, dtype=np.int64)
        remap[kept] = np.arange(K)
        live_tab = a["tab_dish"] >= 0
        a["tab_dish"][live_tab] = remap[a["tab_dish"][live_tab]]
        for f in ("dish_m", "dish_n", "dish_sq", "dish_label"):
            arr = a[f]
            new = np.zeros_like(arr)
            new[:K] = arr[kept]
            a[f] = new
        a["dish_alive"] = np.zeros_like(a["dish_alive"])
        a["dish_alive"][:K] = 1
        a["live"] = np.full_like(a["live"], -1)
        a["live"][:K] = np.arange(K)
        a["dish_pos"] = np.full_like(a["dish_pos"], -1)
        a["dish_pos"][:K] = np.arange(K)
        bias = np.zeros_like(a["bias"])
        bias[:, :K] = a["bias"][:, kept]
        a["bias"] = bias
        a["meta"][N_LIVE] = K
        a["meta"][N_USED] = K
        return kept

    # -- queries ------------------------------------------------------------

    def live_slots(self) -> np.ndarray:
        """Slots of the live dishes in increasing order."""
        n = int(self._a["meta"][N_LIVE])
        return np.sort(self._a["live"][:n])

    def dish_count(self) -> int:
        return int(self._a["meta"][N_LIVE])

    def dish_labels(self) -> np.ndarray:
        return self._a["dish_label"][self.live_slots()].copy()

    def table_counts_by_dish(self) -> np.ndarray:
        """M_k for the live dishes in slot order."""
        return self._a["dish_m"][self.live_slots()].copy()

    def dish_of(self, rating_id: int) -> int:
        slot = self._a["cust_table"][rating_id]
        return -1 if slot < 0 else int(self._a["tab_dish"][slot])

    def dish_assignments(self) -> np.ndarray:
        """Dish slot of every customer (-1 when unseated)."""
        ct = self._a["cust_table"]
        out = np.full(ct.size, -1, dtype=np.int64)
        seated = ct >= 0
        out[seated] = self._a["tab_dish"][ct[seated]]
        return out

    def tables(self, restaurant_id: int):
        """(slot, count, dish slot) of the live tables of a restaurant."""
        a = self._a
        ptr = a["rest_ptr"][restaurant_id]
        slots = a["rest_tabs"][ptr : ptr + a["rest_ntab"][restaurant_id]]
        return [(int(s), int(a["tab_count"][s]), int(a["tab_dish"][s])) for s in slots]

    def table_of(self, rating_id: int) -> int:
        return int(self._a["cust_table"][rating_id])

    def num_tables(self) -> int:
        return int(self._a["rest_ntab"].sum())

    def seated(self) -> int:
        return int(self._a["rest_ncust"].sum())

    def residual_of(self, rating_id: int) -> float:
        return float(self._a["cust_q"][rating_id] * QINV)

    def dish_stats(self, slot: int):
        """(M_k, n_k, s_k) of a dish slot."""
        a = self._a
        return int(a["dish_m"][slot]), int(a["dish_n"][slot]), float(a["dish_sq"][slot] * QINV)

    # -- Gibbs moves --------------------------------------------------------

    def _scratch(self, n):
        return np.empty(n + 2), np.empty(self.dish_count() + 2), np.empty(self.dish_count() + 2)

    def remove_customer(self, rating_id: int):
        if self._a["cust_table"][rating_id] < 0:
            raise BookkeepingError(f"customer {rating_id} is not seated")
        _unseat(self.arrays, rating_id)

    def add_customer(self, rating_id: int, table_id: int, x: float):
        """Seat an unseated customer at a given live table of its restaurant."""
        a = self._a
        if a["cust_table"][rating_id] >= 0:
            raise BookkeepingError(f"customer {rating_id} is already seated")
        rest = a["cust_rest"][rating_id]
        if not (a["rest_ptr"][rest] <= table_id < a["rest_ptr"][rest + 1]) or a["tab_dish"][table_id] < 0:
            raise BookkeepingError(f"table {table_id} is not a live table of restaurant {rest}")
        _seat(self.arrays, rating_id, table_id, _quantize(float(x)))

    def table_log_weights(self, restaurant_id: int, x: float, other: int = 0):
        """Unnormalized log weights of joining each live table and of opening a new one."""
        ntab = int(self._a["rest_ntab"][restaurant_id])
        w, fk, _ = self._scratch(ntab)
        _table_weights(self.arrays, restaurant_id, float(x), int(other), w, fk)
        return w[:ntab].copy(), float(w[ntab])

    def sample_table(self, rng, restaurant_id: int, rating_id: int, x: float, other: int | None = None) -> int:
        """Seat an unseated customer; a new table immediately gets a dish."""
        a = self._a
        if a["cust_table"][rating_id] >= 0:
            raise BookkeepingError(f"customer {rating_id} is already seated")
        if a["cust_rest"][rating_id] != restaurant_id:
            raise BookkeepingError(f"customer {rating_id} does not belong to restaurant {restaurant_id}")
        if other is None:
            other = int(a["cust_other"][rating_id])
        self.ensure_capacity(1)
        qx = int(_quantize(float(x)))
        w, fk, wd = self._scratch(int(a["rest_ntab"][restaurant_id]))
        slot = _seat_customer(self.arrays, rng, rating_id, qx * QINV, qx, other, w, fk, wd)
        if slot < 0:
            raise SamplerError(f"table step: degenerate weights for customer {rating_id}")
        return int(slot)

    def sample_dish(self, rng, table_id: int) -> int:
        """Resample the dish of one live table given everything else."""
        a = self._a
        if a["tab_dish"][table_id] < 0 or a["tab_count"][table_id] == 0:
            raise BookkeepingError(f"table {table_id} is not live")
        rest = int(np.searchsorted(a["rest_ptr"], table_id, side="right") - 1)
        ptr, end = a["rest_ptr"][rest], a["rest_ptr"][rest + 1]
        custs = a["rest_cust"][ptr:end]
        members = np.ascontiguousarray(custs[a["cust_table"][custs] == table_id])
        self.ensure_capacity(1)
        xs = np.empty(members.size)
        wd = np.empty(self.dish_count() + 2)
        empty = np.zeros(0)
        k = _resample_table_dish(
            self.arrays, self.arrays, rng, table_id, members, 0, members.size, xs, wd, empty, empty, 0.0, False
        )
        if k < 0:
            raise SamplerError(f"dish step: degenerate weights for table {table_id}")
        return int(k)

    def dish_log_weights(self, table_id: int):
        """Log weights of the dish draw for a table with the table itself excluded.

        Returns (live slots, weights over those slots, new-dish weight).  The
        franchise is left unchanged.
        """
        a = self._a
        k_old = int(a["tab_dish"][table_id])
        rest = int(np.searchsorted(a["rest_ptr"], table_id, side="right") - 1)
        ptr, end = a["rest_ptr"][rest], a["rest_ptr"][rest + 1]
        custs = a["rest_cust"][ptr:end]
        members = custs[a["cust_table"][custs] == table_id]
        q = a["cust_q"][members]
        xs = q * QINV
        n, sq_t = members.size, int(q.sum())
        s, ss = sq_t * QINV, float(xs @ xs)
        snap = {f: a[f].copy() for f in ("dish_m", "dish_n", "dish_sq", "dish_alive", "dish_pos", "live", "meta")}
        try:
            a["dish_n"][k_old] -= n
            a["dish_sq"][k_old] -= sq_t
            a["dish_m"][k_old] -= 1
            F = self.arrays
            if a["dish_m"][k_old] == 0:
                _kill_dish(F, k_old)
            slots = self.live_slots()
            w = np.array([
                math.log(a["dish_m"][k]) + _group_ll(F, k, members, 0, n, xs, n, s, ss) for k in slots
            ])
            w_new = math.log(self.beta) + _group_ll(F, -1, members, 0, n, xs, n, s, ss)
        finally:
            a.update(snap)
        return slots, w, w_new

    def predictive_dish_probs(self, restaurant_id: int):
        """Probability that a new customer of the restaurant eats each live dish, and a new one.

        Returns (live slots, probabilities over those slots, new-dish probability).
        """
        a = self._a
        slots = self.live_slots()
        M = a["dish_m"][slots].astype(float)
        sum_m = M.sum()
        gamma, beta = self.gamma, self.beta
        n_r = float(a["rest_ncust"][restaurant_id])
        local = np.zeros(slots.size)
        pos = {int(s): i for i, s in enumerate(slots)}
        for _, cnt, dish in self.tables(restaurant_id):
            local[pos[dish]] += cnt
        probs = (local + gamma * M / (sum_m + beta)) / (n_r + gamma)
        p_new = gamma * beta / ((sum_m + beta) * (n_r + gamma))
        return slots, probs, p_new

    # -- seating from explicit assignments -----------------------------------

    def load_seating(self, table_of, dish_of_table, residuals=None):
        """Seat every customer from restaurant-local table labels.

        ``table_of[r]`` is any hashable table label, unique within the
        customer's restaurant; ``dish_of_table[(restaurant, label)]`` is an
        integer dish label.  A label of ``None`` leaves the customer
        unseated.  The franchise must be empty.
        """
        a = self._a
        N = a["cust_rest"].size
        if self.seated():
            raise BookkeepingError("load_seating needs an empty franchise")
        dish_labels = sorted({int(v) for v in dish_of_table.values()})
        self.ensure_capacity(len(dish_labels))
        dummy = np.random.Generator(np.random.Philox(0))
        F = self.arrays
        dish_slot = {}
        for lab in dish_labels:
            dish_slot[lab] = int(_new_dish(F, dummy))
        table_slot = {}
        q = np.zeros(N, dtype=np.int64) if residuals is None else np.round(np.asarray(residuals) * QSCALE).astype(np.int64)
        for r in range(N):
            if table_of[r] is None:
                continue
            rest = int(a["cust_rest"][r])
            key = (rest, table_of[r])
            if key not in table_slot:
                table_slot[key] = int(_open_table(F, rest, dish_slot[int(dish_of_table[key])]))
            _seat(F, r, table_slot[key], q[r])
        return dish_slot

    # -- integrity ----------------------------------------------------------

    def check(self):
        """Recount everything from the customer assignments; raise on any mismatch."""
        a = self._a
        N = a["cust_rest"].size
        ct = a["cust_table"]
        seated = ct >= 0
        tab_count = np.bincount(ct[seated], minlength=N)
        live_tab = tab_count > 0
        if not np.array_equal(tab_count, a["tab_count"] * (a["tab_dish"] >= 0)):
            raise BookkeepingError("table counts out of sync")
        if np.any((a["tab_dish"] >= 0) != live_tab):
            raise BookkeepingError("empty table left open or occupied table closed")
        owner = np.searchsorted(a["rest_ptr"], np.arange(N), side="right") - 1
        if np.any(owner[ct[seated]] != a["cust_rest"][seated]):
            raise BookkeepingError("customer seated in another restaurant's table")
        ntab = np.bincount(owner[live_tab], minlength=self.n_restaurants)
        if not np.array_equal(ntab, a["rest_ntab"]):
            raise BookkeepingError("per-restaurant table counts out of sync")
        if not np.array_equal(np.bincount(a["cust_rest"][seated], minlength=self.n_restaurants), a["rest_ncust"]):
            raise BookkeepingError("per-restaurant customer counts out of sync")
        for rest in range(self.n_restaurants):
            ptr = a["rest_ptr"][rest]
            window = a["rest_tabs"][ptr : a["rest_ptr"][rest + 1]]
            if not np.array_equal(np.sort(window), np.arange(ptr, a["rest_ptr"][rest + 1])):
                raise BookkeepingError(f"slot window of restaurant {rest} corrupted")
            if not np.array_equal(a["tab_pos"][window], np.arange(ptr, a["rest_ptr"][rest + 1])):
                raise BookkeepingError(f"table positions of restaurant {rest} corrupted")
            if not np.all(live_tab[window[: a["rest_ntab"][rest]]]):
                raise BookkeepingError(f"live list of restaurant {rest} holds a closed table")
        cap = self.capacity
        dish = a["tab_dish"][live_tab]
        M = np.bincount(dish, minlength=cap)
        cust_dish = a["tab_dish"][ct[seated]]
        n = np.bincount(cust_dish, minlength=cap)
        sq = np.zeros(cap, dtype=np.int64)
        np.add.at(sq, cust_dish, a["cust_q"][seated])
        alive = M > 0
        used = self.n_used
        if np.any(alive[used:]):
            raise BookkeepingError("table serves an unallocated dish")
        for name, ref in (("dish_m", M), ("dish_n", n), ("dish_sq", sq)):
            if not np.array_equal(a[name][:used][alive[:used]], ref[:used][alive[:used]]):
                raise BookkeepingError(f"{name} out of sync")
        if not np.array_equal(a["dish_alive"][:used].astype(bool), alive[:used]):
            raise BookkeepingError("dish liveness out of sync")
        live = np.sort(a["live"][: a["meta"][N_LIVE]])
        if not np.array_equal(live, np.flatnonzero(alive)):
            raise BookkeepingError("live dish list out of sync")
        if not np.array_equal(a["dish_pos"][a["live"][: a["meta"][N_LIVE]]], np.arange(a["meta"][N_LIVE])):
            raise BookkeepingError("dish positions out of sync")
        labels = a["dish_label"][live]
        if np.any(np.diff(labels) <= 0) or (labels.size and labels.max() >= a["meta"][NEXT_LABEL]):
            raise BookkeepingError("dish labels not increasing")

    def state_arrays(self) -> dict:
        return {k: v.copy() for k, v in self._a.items()}

    @classmethod
    def from_state_arrays(cls, arrays: dict, likelihood: str, n_restaurants: int, n_other: int) -> "Franchise":
        self = cls.__new__(cls)
        self.likelihood = likelihood
        self.n_restaurants = int(n_restaurants)
        self.n_other = int(n_other)
        self._a = {k: np.ascontiguousarray(v) for k, v in arrays.items()}
        return self

    def dump(self, name: str = "franchise") -> str:
        """Text listing of restaurants, their tables and the dish registry."""
        a = self._a
        lines = [f"{name}: {self.dish_count()} dishes, {self.num_tables()} tables, {self.seated()} customers"]
        for rest in range(self.n_restaurants):
            tabs = self.tables(rest)
            if not tabs:
                continue
            desc = ", ".join(f"(N={cnt}, dish={a['dish_label'][d]})" for _, cnt, d in tabs)
            lines.append(f"  restaurant {rest}: {desc}")
        lines.append("  dishes:")
        for k in self.live_slots():
            m, n, s = self.dish_stats(k)
            lines.append(f"    dish {a['dish_label'][k]}: tables={m} customers={n} resid_sum={s:.6g}")
        return "\n".join(lines)
