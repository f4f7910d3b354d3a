"""
Inducing-point (FITC) binary GP classification at one tree node.

Conditioned on M inducing values, the latent values are taken as independent
with variances ``d = diag(K_NN - Q)``, ``Q = K_NM K_MM^-1 K_MN``.  With the
Polya-Gamma pseudo-observations ``z = kappa / omega`` this gives

    Lambda = diag(1/omega) + diag(d)
    B      = K_MM + K_MN Lambda^-1 K_NM

and every quantity below needs only Cholesky factors of ``K_MM`` and ``B``
(both M x M) plus elementwise work on N-vectors.

Kernel blocks are passed in; ``kmm`` is expected to carry the jitter.  Arrays
of omega may carry a leading sample axis (L, N), in which case results carry
the same leading axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gpc_node import kappa, init_state, GibbsState, GibbsRun
from .linalg import chol_logdet, chol_solve, cholesky, tri_solve
from .pg import sample_pg

__all__ = [
    "LAMBDA_FLOOR",
    "FITCCache",
    "fitc_cache",
    "fitc_posterior_f",
    "fitc_posterior_fbar",
    "fitc_predictive",
    "fitc_marginal_loglik_given_omega",
    "fitc_marginal_grad",
    "fitc_predictive_grad",
    "fitc_sample_f",
    "fitc_run_gibbs",
]

LAMBDA_FLOOR = 1e-8
_VAR_FLOOR = 1e-12


def _factor(a, factor):
    return cholesky(a) if factor is None else factor(a)


@dataclass
class FITCCache:
    """Quantities reused across test points for fixed omega samples.

    Arrays carry a leading sample axis of length L.  ``chol_b`` is the
    Cholesky factor of ``B`` per sample; ``m = B^-1 K_MN Lambda^-1 z``.
    """

    omega: np.ndarray   # (L, N)
    lam: np.ndarray     # (L, N)
    chol_b: np.ndarray  # (L, M, M)
    chol_kmm: np.ndarray
    m: np.ndarray       # (L, M)
    v: np.ndarray       # (L, M) = K_MN Lambda^-1 z
    z: np.ndarray       # (L, N)
    floored: np.ndarray  # (L, N) bool, Lambda entries clamped at the floor
    d_clipped: np.ndarray  # (N,) bool, diag(K_NN - Q) entries clamped at zero

    @property
    def n_samples(self) -> int:
        return self.omega.shape[0]

    def matches(self, omega) -> bool:
        omega = np.atleast_2d(omega)
        return omega.shape == self.omega.shape and bool(np.array_equal(omega, self.omega))


def _residual_diag(knn_diag, knm, chol_kmm, return_raw=False):
    a = tri_solve(chol_kmm, knm.T)          # (M, N)
    raw = np.asarray(knn_diag, dtype=float) - np.sum(a * a, axis=0)
    d = np.maximum(raw, 0.0)
    return (d, raw < 0) if return_raw else d


def fitc_cache(knn_diag, knm, kmm, y, omega, factor=None, chol_kmm=None) -> FITCCache:
    """Build Lambda and the factor of B for each row of ``omega``."""
    omega = np.atleast_2d(np.asarray(omega, dtype=float))
    if np.any(omega <= 0):
        raise ValueError("omega must be positive")
    knm = np.asarray(knm, dtype=float)
    n, m_ = knm.shape
    if omega.shape[1] != n:
        raise ValueError("omega does not match the number of data points")
    if chol_kmm is None:
        chol_kmm = _factor(kmm, factor)
    d, d_clipped = _residual_diag(knn_diag, knm, chol_kmm, return_raw=True)
    raw = 1.0 / omega + d[None, :]
    lam = np.maximum(raw, LAMBDA_FLOOR)
    floored = raw < LAMBDA_FLOOR
    b = kmm[None] + np.einsum("nm,ln,nk->lmk", knm, 1.0 / lam, knm)
    chol_b = np.stack([_factor(bi, factor) for bi in b]) if b.shape[0] else b
    z = kappa(y)[None, :] / omega
    v = (z / lam) @ knm
    m = chol_solve(chol_b, v)
    return FITCCache(omega, lam, chol_b, chol_kmm, m, v, z, floored, d_clipped)


def fitc_posterior_fbar(knn_diag, knm, kmm, y, omega, factor=None):
    """Mean and covariance of the inducing values given omega (single omega vector).

    With no data (N = 0) this is the prior N(0, K_MM).
    """
    knm = np.asarray(knm, dtype=float).reshape(-1, np.shape(kmm)[0])
    if knm.shape[0] == 0:
        return np.zeros(kmm.shape[0]), np.array(kmm, dtype=float)
    c = fitc_cache(knn_diag, knm, kmm, y, omega, factor)
    lb = c.chol_b[0]
    mean = kmm @ c.m[0]
    w = tri_solve(lb, kmm)
    return mean, w.T @ w


def fitc_posterior_f(knn, knm, kmm, y, omega, factor=None):
    """Mean and covariance of the training latent values given omega.

    ``knn`` is normally the diagonal of K_NN; the covariance is then
    ``diag(K_NN - Q) + K_NM B^-1 K_MN``, the form the sampler draws from.  A
    full (N, N) ``knn`` gives ``K_NN - K_NM (K_MM^-1 - B^-1) K_MN`` instead.
    The two agree whenever Q reproduces K_NN (inducing inputs equal to the
    data).  Nothing of size N x N is factorised either way.
    """
    knn = np.asarray(knn, dtype=float)
    full = knn.ndim == 2
    diag = np.diagonal(knn) if full else knn
    c = fitc_cache(diag, knm, kmm, y, omega, factor)
    mean = knm @ c.m[0]
    a = tri_solve(c.chol_b[0], knm.T)
    cov = a.T @ a
    if full:
        p = tri_solve(c.chol_kmm, knm.T)
        cov = cov + knn - p.T @ p
    else:
        cov[np.diag_indices_from(cov)] += _residual_diag(diag, knm, c.chol_kmm)
    return mean, cov


def fitc_predictive(ksm, kss, cache: FITCCache, omega=None, return_all=False):
    """Predictive moments of f* through the inducing values.

    ``ksm`` is (T, M) between test points and inducing inputs, ``kss`` the
    (T,) prior variances.  Results are averaged over nothing: they come back
    shaped (L, T), or (T,) when the cache holds a single sample.
    """
    if omega is not None and not cache.matches(omega):
        raise ValueError("cache was built from different omega samples")
    ksm = np.asarray(ksm, dtype=float)
    mu = np.einsum("tm,lm->lt", ksm, cache.m)
    p = tri_solve(cache.chol_kmm, ksm.T)
    prior_red = np.sum(p * p, axis=0)
    bk = tri_solve(cache.chol_b, np.broadcast_to(ksm.T, (cache.n_samples,) + ksm.T.shape))
    var = np.asarray(kss, dtype=float)[None, :] - prior_red[None, :] + np.sum(bk * bk, axis=1)
    var = np.clip(var, _VAR_FLOOR, None)
    if cache.n_samples == 1 and not return_all:
        return mu[0], var[0]
    return mu, var


def fitc_marginal_loglik_given_omega(knn_diag, knm, kmm, y, omega, factor=None) -> float:
    """``log N(z | 0, Lambda + Q)`` by Woodbury and the determinant lemma."""
    value, _, _ = fitc_marginal_grad(knn_diag, knm, kmm, y, omega, factor)
    return value


def _marginal_values(c: FITCCache):
    n = c.z.shape[1]
    quad = np.sum(c.z * c.z / c.lam, axis=1) - np.einsum("lm,lm->l", c.v, c.m)
    logdet = chol_logdet(c.chol_b) - chol_logdet(c.chol_kmm) + np.sum(np.log(c.lam), axis=1)
    return -0.5 * (quad + logdet + n * np.log(2.0 * np.pi))


def _backprop(knm, c: FITCCache, g_b, g_v, g_lam, g_p, g_kmm, g_knm):
    """Push gradients w.r.t. B, v, Lambda and P = K_MM^-1 back to K_NM and K_MM.

    All per-sample gradients are summed over the leading axis.
    """
    inv_lam = 1.0 / c.lam
    zl = c.z * inv_lam
    # v = K_MN (z / Lambda)
    g_knm += np.einsum("ln,lm->nm", zl, g_v)
    g_lam = g_lam - zl * inv_lam * (g_v @ knm.T)
    # B = K_MM + K_MN Lambda^-1 K_NM
    g_kmm += g_b.sum(axis=0)
    gbs = g_b + np.swapaxes(g_b, -1, -2)
    g_knm += np.einsum("ln,nk,lkm->nm", inv_lam, knm, gbs)
    g_lam = g_lam - np.einsum("nk,lkm,nm->ln", knm, g_b, knm) * inv_lam ** 2
    # Lambda = 1/omega + knn - diag(K_NM P K_MN), frozen where either clamp binds
    g_q = -np.where(c.floored, 0.0, g_lam).sum(axis=0)
    g_q[c.d_clipped] = 0.0
    p = chol_solve(c.chol_kmm, np.eye(knm.shape[1]))
    kp = knm @ p
    g_knm += 2.0 * g_q[:, None] * kp
    g_p = g_p + knm.T @ (g_q[:, None] * knm)
    g_kmm -= p @ g_p @ p
    return g_kmm, g_knm


def fitc_marginal_grad(knn_diag, knm, kmm, y, omegas, factor=None, cache=None):
    """Mean over omega rows of the FITC marginal and its K_NM, K_MM gradients."""
    knm = np.asarray(knm, dtype=float)
    c = cache if cache is not None else fitc_cache(knn_diag, knm, kmm, y, omegas, factor)
    values = _marginal_values(c)
    l = c.n_samples
    mm = c.m
    eye = np.broadcast_to(np.eye(knm.shape[1]), c.chol_b.shape)
    binv = chol_solve(c.chol_b, eye)
    g_b = -0.5 * (np.einsum("li,lj->lij", mm, mm) + binv) / l
    g_v = mm / l
    g_lam = -0.5 * (-(c.z ** 2) / c.lam ** 2 + 1.0 / c.lam) / l
    g_kmm = 0.5 * chol_solve(c.chol_kmm, np.eye(knm.shape[1]))
    g_knm = np.zeros_like(knm)
    g_kmm, g_knm = _backprop(knm, c, g_b, g_v, g_lam, np.zeros_like(g_kmm), g_kmm, g_knm)
    return float(values.mean()), g_knm, g_kmm


def fitc_predictive_grad(knm, ksm, kss, cache: FITCCache, g_mu, g_var):
    """Gradients of ``sum(g_mu * mu + g_var * var)`` over all cached samples.

    ``g_mu`` and ``g_var`` are (L, T).  Returns gradients w.r.t. K_NM, K_MM
    and K_SM (test-to-inducing).  Prior variances get no gradient.
    """
    knm = np.asarray(knm, dtype=float)
    ksm = np.asarray(ksm, dtype=float)
    c = cache
    _, var = fitc_predictive(ksm, kss, c, return_all=True)
    g_var = np.where(var <= _VAR_FLOOR, 0.0, g_var)
    mdim = knm.shape[1]
    p = chol_solve(c.chol_kmm, np.eye(mdim))
    binv = chol_solve(c.chol_b, np.broadcast_to(np.eye(mdim), c.chol_b.shape))
    gvs = g_var.sum(axis=0)
    g_ksm = (g_mu.T @ c.m) - 2.0 * gvs[:, None] * (ksm @ p)
    g_ksm += 2.0 * np.einsum("lt,lmk,tk->tm", g_var, binv, ksm)
    g_m = g_mu @ ksm                                   # (L, M)
    g_v = np.einsum("lij,lj->li", binv, g_m)
    g_binv = np.einsum("tm,lt,tk->lmk", ksm, g_var, ksm)
    g_b = -np.einsum("lij,ljk,lkm->lim", binv, g_binv, binv) - np.einsum("li,lj->lij", g_v, c.m)
    g_p = -ksm.T @ (gvs[:, None] * ksm)
    g_kmm = np.zeros((mdim, mdim))
    g_knm = np.zeros_like(knm)
    g_kmm, g_knm = _backprop(knm, c, g_b, g_v, np.zeros_like(c.lam), g_p, g_kmm, g_knm)
    return g_knm, g_kmm, g_ksm


def fitc_sample_f(knn_diag, knm, kmm, y, omega, rng, factor=None, chol_kmm=None):
    """One draw of the training latent values per omega row.

    ``f = K_NM (B^-1 v + L_B^-T e1) + sqrt(d) e2`` has mean ``K_NM B^-1 v`` and
    covariance ``K_NM B^-1 K_MN + diag(d)``.
    """
    c = fitc_cache(knn_diag, knm, kmm, y, omega, factor, chol_kmm)
    l, n = c.omega.shape
    mdim = knm.shape[1]
    e1 = rng.standard_normal((l, mdim))
    e2 = rng.standard_normal((l, n))
    lt = np.swapaxes(c.chol_b, -1, -2)
    fbar_part = c.m + np.linalg.solve(lt, e1[..., None])[..., 0]
    d = _residual_diag(knn_diag, knm, c.chol_kmm)
    return fbar_part @ knm.T + np.sqrt(d)[None, :] * e2


def fitc_run_gibbs(knn_diag, knm, kmm, y, n_chains, rng, burn_in=5, thin=5, n_samples=1,
                   factor=None, state=None) -> GibbsRun:
    """Blocked Gibbs over (f, omega) under the FITC prior; mirrors ``run_gibbs``."""
    y = np.asarray(y, dtype=float)
    knm = np.asarray(knm, dtype=float)
    chol_kmm = _factor(kmm, factor)
    if state is None:
        state = init_state(n_chains, y.size)

    def sweep(s):
        f = fitc_sample_f(knn_diag, knm, kmm, y, s.omega, rng, factor, chol_kmm)
        return GibbsState(f, sample_pg(1, f, rng))

    for _ in range(burn_in):
        state = sweep(state)
    fs, oms = [], []
    for _ in range(n_samples):
        for _ in range(thin):
            state = sweep(state)
        fs.append(state.f)
        oms.append(state.omega)
    return GibbsRun(np.stack(fs), np.stack(oms), state)
