"""Random streams and the small statistical kernels used by every sampler step.

All likelihood arithmetic is done in log space. The numba-compiled helpers at
the bottom of this module are the ones the inner sampler loops call; the
plain-numpy functions above them are the public surface and the reference
versions the tests check against.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy import linalg

LOG_2PI = math.log(2.0 * math.pi)


class SamplerError(RuntimeError):
    """A sampler step produced an unusable distribution (all-zero or NaN weights)."""


def make_rng(seed: int, chain_id: int = 0) -> np.random.Generator:
    """Independent, reproducible stream for chain ``chain_id`` of run ``seed``.

    Philox is counter based, so streams for different chains never overlap and
    the sequence is identical across platforms.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(chain_id)])
    return np.random.Generator(np.random.Philox(ss))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    bg = np.random.Philox()
    bg.state = state
    return np.random.Generator(bg)


@dataclass(frozen=True)
class ConjNormalPosterior:
    mean: float
    variance: float


def conj_normal_posterior(prior_mean, prior_var, obs_sum, obs_count, obs_var):
    """Posterior of a Gaussian mean under a Gaussian prior with known noise."""
    # written so that no data returns the prior bit-exactly
    var = prior_var / (1.0 + prior_var * obs_count / obs_var)
    mean = prior_mean + var * (obs_sum - obs_count * prior_mean) / obs_var
    return ConjNormalPosterior(mean, var)


def gaussian_loglik(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var)) - (x - mean) ** 2 / (2.0 * var)


def spiked_determinant(n: int, sigma2: float, sigmaP2: float) -> float:
    """det(sigma2 * I_n + sigmaP2 * ones((n, n))) in closed form."""
    return sigma2**n + n * sigma2 ** (n - 1) * sigmaP2


def log_spiked_determinant(n, sigma2, sigmaP2):
    # same quantity, safe for large n
    return n * math.log(sigma2) + math.log1p(n * sigmaP2 / sigma2)


def grouped_marginal_loglik(xs, muP, sigmaP2, sigma2) -> float:
    """Joint log density of residuals sharing one Gaussian-distributed mean.

    The covariance is ``sigma2 * I + sigmaP2 * 11^T``; its inverse is applied
    with the Sherman-Morrison identity so no n x n system is ever formed.
    """
    xs = np.asarray(xs, dtype=float)
    n = xs.size
    if n < 1:
        raise ValueError("grouped_marginal_loglik needs at least one residual")
    y = xs - muP
    return _grouped_loglik_stats(n, y.sum(), y @ y, sigma2, sigmaP2)


def mvn_sample(rng: np.random.Generator, mean, precision) -> np.ndarray:
    """Draw from N(mean, precision^-1) through the Cholesky factor of the precision."""
    mean = np.asarray(mean, dtype=float)
    try:
        L = np.linalg.cholesky(precision)
    except np.linalg.LinAlgError as err:
        raise np.linalg.LinAlgError("precision matrix is not positive definite") from err
    z = rng.standard_normal(mean.shape[0])
    return mean + linalg.solve_triangular(L, z, lower=True, trans="T")


def wishart_sample(rng: np.random.Generator, scale, dof: float) -> np.ndarray:
    """Bartlett-decomposition draw from Wishart(scale, dof); E[W] = dof * scale."""
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    D = scale.shape[0]
    if dof <= D - 1:
        raise ValueError(f"Wishart dof must exceed D - 1 = {D - 1}, got {dof}")
    try:
        L = np.linalg.cholesky(scale)
    except np.linalg.LinAlgError as err:
        raise np.linalg.LinAlgError("Wishart scale is not positive definite") from err
    A = np.zeros((D, D))
    A[np.diag_indices(D)] = np.sqrt(rng.chisquare(dof - np.arange(D)))
    rows, cols = np.tril_indices(D, -1)
    A[rows, cols] = rng.standard_normal(rows.size)
    LA = L @ A
    W = LA @ LA.T
    return 0.5 * (W + W.T)


def categorical_sample(rng: np.random.Generator, weights, log: bool = False, step: str = "categorical"):
    """Index drawn with probability proportional to ``weights`` (or exp of log-weights)."""
    w = np.asarray(weights, dtype=float)
    if log:
        m = np.max(w) if w.size else -np.inf
        if not np.isfinite(m) or np.isnan(w).any():
            raise SamplerError(f"{step}: log-weights have no finite maximum: {w!r}")
        w = np.exp(w - m)
    if w.size == 0 or np.isnan(w).any() or np.isinf(w).any() or (w < 0).any():
        raise SamplerError(f"{step}: invalid weights {w!r}")
    total = w.sum()
    if not total > 0:
        raise SamplerError(f"{step}: all weights are zero")
    cdf = np.cumsum(w)
    idx = int(np.searchsorted(cdf, rng.random() * total, side="right"))
    return min(idx, w.size - 1)


# ---------------------------------------------------------------------------
# compiled kernels


@numba.njit(cache=True)
def _gauss_ll(x, mean, var):
    d = x - mean
    return -0.5 * (LOG_2PI + math.log(var)) - d * d / (2.0 * var)


@numba.njit(cache=True)
def _grouped_loglik_stats(n, sum_y, sumsq_y, sigma2, sigmaP2):
    # y = x - muP; Sherman-Morrison on sigma2*I + sigmaP2*11^T
    denom = sigma2 + n * sigmaP2
    quad = (sumsq_y - sigmaP2 * sum_y * sum_y / denom) / sigma2
    logdet = n * math.log(sigma2) + math.log1p(n * sigmaP2 / sigma2)
    return -0.5 * (n * LOG_2PI + logdet + quad)


@numba.njit(cache=True)
def _sample_log_weights(g, w, n):
    """Draw from the first ``n`` log-weights of ``w``; returns -1 if degenerate."""
    m = -np.inf
    for i in range(n):
        if w[i] > m:
            m = w[i]
    if not (m > -np.inf) or m != m or m == np.inf:
        return -1
    total = 0.0
    for i in range(n):
        w[i] = math.exp(w[i] - m)
        total += w[i]
    u = g.random() * total
    acc = 0.0
    for i in range(n):
        acc += w[i]
        if u < acc:
            return i
    # u landed on the rounding edge; return the last positive entry
    for i in range(n - 1, -1, -1):
        if w[i] > 0.0:
            return i
    return -1


@numba.njit(cache=True)
def _chol_solve_sample(g, P, h, out):
    """out <- draw from N(P^-1 h, P^-1), with P symmetric positive definite.

    Returns False if P fails to factorize.
    """
    D = P.shape[0]
    L = np.zeros((D, D))
    for i in range(D):
        for j in range(i + 1):
            s = P[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if s <= 0.0:
                    return False
                L[i, i] = math.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    # forward: L y = h
    y = np.empty(D)
    for i in range(D):
        s = h[i]
        for k in range(i):
            s -= L[i, k] * y[k]
        y[i] = s / L[i, i]
    # backward: L^T out = y + z  gives mean + L^-T z
    for i in range(D):
        y[i] += g.standard_normal()
    for i in range(D - 1, -1, -1):
        s = y[i]
        for k in range(i + 1, D):
            s -= L[k, i] * out[k]
        out[i] = s / L[i, i]
    return True
