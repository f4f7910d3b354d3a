"""
Polya-Gamma random variates.

Exact draws of PG(1, c) use the alternating-series accept/reject scheme of
Devroye as adapted by Polson, Scott & Windle (2013).  PG(b, c) for integer
b > 1 is a sum of b independent PG(1, c) draws.  The truncated sum-of-gammas
representation is kept both as a fallback sampler and as a test oracle.

All samplers take an explicit ``numpy.random.Generator`` and are otherwise
pure, so identical generator states give identical draws.
"""

from __future__ import annotations

import numpy as np
from scipy.special import log_ndtr

__all__ = [
    "sample_pg",
    "sample_pg_series",
    "pg_mean",
    "pg_variance",
    "pg_series_mean",
    "pg_log_tilt",
    "pg_identity_lhs_rhs",
]

# Switch point between the two piecewise forms of the Jacobi series.
_T = 0.64
_PI2 = np.pi ** 2


def _check_b(b) -> int:
    if not np.isscalar(b):
        raise TypeError("b must be a scalar")
    if b <= 0:
        raise ValueError(f"PG shape b must be positive, got {b}")
    if float(b) != int(b):
        raise ValueError(f"only integer PG shapes are supported, got {b}")
    return int(b)


def pg_mean(b, c):
    """Mean of PG(b, c): ``b / (2c) * tanh(c / 2)``, with limit ``b / 4`` at c = 0."""
    if np.any(np.asarray(b) <= 0):
        raise ValueError("PG shape b must be positive")
    c = np.abs(np.asarray(c, dtype=float))
    small = c < 1e-6
    safe = np.where(small, 1.0, c)
    out = np.where(small, 0.25 - c ** 2 / 48.0, np.tanh(safe / 2.0) / (2.0 * safe))
    out = b * out
    return out[()] if out.ndim == 0 else out


def pg_variance(b, c):
    """Variance of PG(b, c).

    Uses ``b / (4 c^3) * (2 tanh(c/2) - c sech^2(c/2))``, which avoids the
    overflow of the sinh form; a Taylor expansion takes over near zero.
    """
    if np.any(np.asarray(b) <= 0):
        raise ValueError("PG shape b must be positive")
    c = np.abs(np.asarray(c, dtype=float))
    small = c < 1e-2
    safe = np.where(small, 1.0, c)
    th = np.tanh(safe / 2.0)
    big = (2.0 * th - safe * (1.0 - th * th)) / (4.0 * safe ** 3)
    out = b * np.where(small, 1.0 / 24.0 - c ** 2 / 120.0, big)
    return out[()] if out.ndim == 0 else out


def pg_series_mean(b, c, n_terms: int = 200):
    """Mean of the sum-of-gammas series truncated after ``n_terms`` terms."""
    k = np.arange(1, n_terms + 1, dtype=float)
    c = np.asarray(c, dtype=float)
    denom = (k - 0.5) ** 2 + (c[..., None] ** 2) / (4.0 * _PI2)
    return b * np.sum(1.0 / denom, axis=-1) / (2.0 * _PI2)


def pg_log_tilt(omega, c):
    """``log PG(omega | 1, c) - log PG(omega | 1, 0)``.

    The tilted density is ``cosh(c/2) exp(-c^2 omega / 2)`` times the base
    density, so ratios of PG(1, .) densities at a common omega never need the
    base density itself.
    """
    c = np.abs(np.asarray(c, dtype=float))
    omega = np.asarray(omega, dtype=float)
    # log cosh(x) = x + log1p(exp(-2x)) - log 2, stable for large x
    h = c / 2.0
    log_cosh = h + np.log1p(np.exp(-2.0 * h)) - np.log(2.0)
    return log_cosh - 0.5 * c * c * omega


def sample_pg_series(b, c, rng: np.random.Generator, size=None, n_terms: int = 200):
    """Approximate PG(b, c) draws from the truncated sum of gamma variables.

    ``omega = 1/(2 pi^2) sum_k g_k / ((k - 1/2)^2 + c^2 / (4 pi^2))`` with
    ``g_k ~ Gamma(b, 1)``, cut after ``n_terms`` terms (no tail correction).
    """
    if b <= 0:
        raise ValueError(f"PG shape b must be positive, got {b}")
    c = np.asarray(c, dtype=float)
    if size is not None:
        c = np.broadcast_to(c, size)
    k = np.arange(1, n_terms + 1, dtype=float)
    denom = (k - 0.5) ** 2 + (c[..., None] ** 2) / (4.0 * _PI2)
    g = rng.gamma(b, 1.0, size=denom.shape)
    out = np.sum(g / denom, axis=-1) / (2.0 * _PI2)
    return out[()] if out.ndim == 0 else out


def sample_pg(b, c, rng: np.random.Generator, size=None):
    """Exact PG(b, c) draws for integer ``b >= 1``.

    Parameters
    ----------
    b : int
        Shape; the model only ever needs ``b = 1``.
    c : float or array
        Tilt, used through ``|c|``.
    rng : numpy.random.Generator
    size : tuple, optional
        Output shape; defaults to the shape of ``c``.

    Returns
    -------
    float or ndarray
        Non-negative draws.
    """
    b = _check_b(b)
    c = np.asarray(c, dtype=float)
    if size is not None:
        c = np.broadcast_to(c, size)
    flat = np.abs(c).ravel()
    if not np.all(np.isfinite(flat)):
        # the rejection loop would never accept
        raise ValueError("PG tilt must be finite")
    total = np.zeros_like(flat)
    for _ in range(b):
        total += _sample_pg1(flat, rng)
    out = total.reshape(c.shape)
    return out[()] if out.ndim == 0 else out


def _series_coef(n: int, x: np.ndarray) -> np.ndarray:
    k = n + 0.5
    with np.errstate(over="ignore", under="ignore", divide="ignore"):
        left = np.pi * k * (2.0 / (np.pi * x)) ** 1.5 * np.exp(-2.0 * k * k / x)
        right = np.pi * k * np.exp(-0.5 * k * k * _PI2 * x)
    return np.where(x <= _T, left, right)


def _sample_pg1(c: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vectorised exact PG(1, c) for a flat array of non-negative c."""
    z = 0.5 * c  # draw J*(1, z), then omega = J*/4
    out = np.empty_like(z)
    pending = np.arange(z.size)
    while pending.size:
        zp = z[pending]
        x = _propose(zp, rng)
        acc = _accept(x, rng)
        out[pending[acc]] = 0.25 * x[acc]
        pending = pending[~acc]
    return out


def _propose(z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    k = _PI2 / 8.0 + 0.5 * z * z
    # mass ratio q/p of the truncated inverse-Gaussian and exponential pieces
    sq = np.sqrt(1.0 / _T)
    x0 = np.log(k) + k * _T
    lb = x0 - z + log_ndtr(sq * (_T * z - 1.0))
    la = x0 + z + log_ndtr(-sq * (_T * z + 1.0))
    q_over_p = (4.0 / np.pi) * (np.exp(lb) + np.exp(la))
    use_exp = rng.random(z.size) < 1.0 / (1.0 + q_over_p)

    x = np.empty_like(z)
    ne = int(use_exp.sum())
    x[use_exp] = _T + rng.standard_exponential(ne) / k[use_exp]
    if ne < z.size:
        x[~use_exp] = _truncated_inverse_gaussian(z[~use_exp], rng)
    return x


def _truncated_inverse_gaussian(z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """IG(mu = 1/z, lambda = 1) restricted to (0, _T)."""
    out = np.empty_like(z)
    mu_big = z < 1.0 / _T  # mu > _T

    idx = np.flatnonzero(mu_big)
    while idx.size:
        e1 = rng.standard_exponential(idx.size)
        e2 = rng.standard_exponential(idx.size)
        bad = e1 * e1 > 2.0 * e2 / _T
        while bad.any():
            nb = int(bad.sum())
            e1[bad] = rng.standard_exponential(nb)
            e2[bad] = rng.standard_exponential(nb)
            bad = e1 * e1 > 2.0 * e2 / _T
        x = _T / (1.0 + _T * e1) ** 2
        alpha = np.exp(-0.5 * z[idx] ** 2 * x)
        ok = rng.random(idx.size) <= alpha
        out[idx[ok]] = x[ok]
        idx = idx[~ok]

    idx = np.flatnonzero(~mu_big)
    while idx.size:
        mu = 1.0 / z[idx]
        y = rng.standard_normal(idx.size) ** 2
        x = mu + 0.5 * mu * mu * y - 0.5 * mu * np.sqrt(4.0 * mu * y + (mu * y) ** 2)
        flip = rng.random(idx.size) > mu / (mu + x)
        x = np.where(flip, mu * mu / x, x)
        ok = x < _T
        out[idx[ok]] = x[ok]
        idx = idx[~ok]
    return out


def _accept(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    s = _series_coef(0, x)
    y = rng.random(x.size) * s
    accepted = np.zeros(x.size, dtype=bool)
    active = np.ones(x.size, dtype=bool)
    n = 0
    while active.any():
        n += 1
        a = _series_coef(n, x[active])
        if n % 2:
            s[active] -= a
            hit = y[active] <= s[active]
            where = np.flatnonzero(active)[hit]
            accepted[where] = True
            active[where] = False
        else:
            s[active] += a
            miss = y[active] > s[active]
            active[np.flatnonzero(active)[miss]] = False
    return accepted


def pg_identity_lhs_rhs(a, b, f, n_mc: int, rng: np.random.Generator, return_stderr=False):
    """Both sides of the Polya-Gamma integral identity.

    lhs = ``exp(f)^a / (1 + exp(f))^b`` and
    rhs = ``2^-b exp(kappa f) E[exp(-omega f^2 / 2)]`` with
    ``kappa = a - b/2`` and ``omega ~ PG(b, 0)``, the expectation estimated
    from ``n_mc`` exact draws.
    """
    b = _check_b(b)
    lhs = np.exp(a * f - b * np.logaddexp(0.0, f))
    omega = sample_pg(b, 0.0, rng, size=(n_mc,))
    terms = 2.0 ** (-b) * np.exp((a - b / 2.0) * f - 0.5 * omega * f * f)
    rhs = float(terms.mean())
    if return_stderr:
        se = float(terms.std(ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else 0.0
        return float(lhs), rhs, se
    return float(lhs), rhs
