"""
Binary GP classification at a single tree node.

The logistic likelihood is augmented with Polya-Gamma variables so that the
full conditionals are Gaussian (latent values ``f``) and PG(1, f) (the
auxiliary ``omega``).  With ``kappa = y - 1/2`` and ``z = kappa / omega``, the
augmented likelihood acts like Gaussian pseudo-observations ``z`` with noise
``diag(1/omega)``; every formula below is written in that form.

Kernel matrices are passed in already jittered; nothing here knows about
embeddings.  Chains are vectorised along a leading axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import expit

from .linalg import chol_logdet, chol_solve, cholesky, tri_solve
from .pg import pg_mean, sample_pg

__all__ = [
    "GibbsConfig",
    "NodeData",
    "GibbsState",
    "GibbsRun",
    "kappa",
    "init_state",
    "conditional_moments",
    "sample_f_conditional",
    "gibbs_step",
    "run_gibbs",
    "marginal_loglik_given_omega",
    "marginal_loglik_grad",
    "predictive_posterior",
    "predictive_posterior_backward",
    "gauss_hermite",
    "predictive_bernoulli",
    "bernoulli_loglik_grad",
    "DEGENERATE_CONFIDENCE",
]

# Probability assigned to the only observed routing label at a one-sided node.
DEGENERATE_CONFIDENCE = 1.0 - 1e-4
_VAR_FLOOR = 1e-12


@dataclass(frozen=True)
class GibbsConfig:
    train_chains: int = 20
    test_chains: int = 30
    steps_between_samples: int = 5
    burn_in: int = 5
    gh_degree: int = 20
    test_samples: int = 1  # retained samples per chain at prediction time

    def __post_init__(self):
        for name in ("train_chains", "test_chains", "steps_between_samples", "burn_in", "gh_degree", "test_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class NodeData:
    """Inputs routed to a node and their binary routing labels (1 = left)."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.X.shape[0] != self.y.size:
            raise ValueError("X and y row counts differ")
        if not np.all((self.y == 0) | (self.y == 1)):
            raise ValueError("routing labels must be 0 or 1")

    @property
    def is_degenerate(self) -> bool:
        return np.unique(self.y).size < 2


@dataclass
class GibbsState:
    """Current ``f`` and ``omega`` of every chain, both shaped (chains, N)."""

    f: np.ndarray
    omega: np.ndarray

    @property
    def n_chains(self) -> int:
        return self.f.shape[0]


@dataclass
class GibbsRun:
    """Retained samples shaped (samples_per_chain, chains, N)."""

    f: np.ndarray
    omega: np.ndarray
    state: GibbsState

    def pooled_omega(self) -> np.ndarray:
        return self.omega.reshape(-1, self.omega.shape[-1])

    def pooled_f(self) -> np.ndarray:
        return self.f.reshape(-1, self.f.shape[-1])


def kappa(y) -> np.ndarray:
    return np.asarray(y, dtype=float) - 0.5


def init_state(n_chains: int, n: int) -> GibbsState:
    return GibbsState(np.zeros((n_chains, n)), np.full((n_chains, n), pg_mean(1, 0.0)))


def _noisy_factor(k, omega):
    """Cholesky factors of ``K + diag(1/omega)`` for each row of ``omega``."""
    omega = np.atleast_2d(omega)
    a = k[None, :, :] + np.einsum("ij,li->lij", np.eye(k.shape[0]), 1.0 / omega)
    return cholesky(a)


def conditional_moments(k, omega, y):
    """Mean and covariance of ``p(f | y, omega)`` (single omega vector)."""
    omega = np.asarray(omega, dtype=float)
    l = _noisy_factor(k, omega)[0]
    z = kappa(y) / omega
    mean = k @ chol_solve(l, z)
    v = tri_solve(l, k)
    cov = k - v.T @ v
    return mean, 0.5 * (cov + cov.T)


def sample_f_conditional(k, omega, y, rng, chol_k=None):
    """One draw of ``f ~ p(f | y, omega)`` per chain.

    Uses pathwise conditioning: ``f = f0 + K (K + W^-1)^-1 (z - f0 - e)`` with
    ``f0 ~ N(0, K)`` and ``e ~ N(0, W^-1)``, which avoids forming the
    posterior covariance.
    """
    omega = np.atleast_2d(omega)
    c, n = omega.shape
    if chol_k is None:
        chol_k = cholesky(k)
    f0 = rng.standard_normal((c, n)) @ chol_k.T
    e = rng.standard_normal((c, n)) / np.sqrt(omega)
    z = kappa(y)[None, :] / omega
    l = _noisy_factor(k, omega)
    return f0 + chol_solve(l, z - f0 - e) @ k


def gibbs_step(k, y, state: GibbsState, rng, chol_k=None) -> GibbsState:
    """One blocked sweep: f | omega for every chain, then omega_j ~ PG(1, f_j)."""
    f = sample_f_conditional(k, state.omega, y, rng, chol_k)
    omega = sample_pg(1, f, rng)
    return GibbsState(f, omega)


def run_gibbs(k, y, n_chains, rng, burn_in=5, thin=5, n_samples=1, chol_k=None, state=None) -> GibbsRun:
    """Run parallel chains and keep ``n_samples`` states per chain, ``thin`` sweeps apart."""
    y = np.asarray(y, dtype=float)
    if chol_k is None:
        chol_k = cholesky(k)
    if state is None:
        state = init_state(n_chains, y.size)
    for _ in range(burn_in):
        state = gibbs_step(k, y, state, rng, chol_k)
    fs, oms = [], []
    for _ in range(n_samples):
        for _ in range(thin):
            state = gibbs_step(k, y, state, rng, chol_k)
        fs.append(state.f)
        oms.append(state.omega)
    return GibbsRun(np.stack(fs), np.stack(oms), state)


def marginal_loglik_given_omega(k, y, omega) -> float:
    """``log N(z | 0, K + diag(1/omega))`` with ``z = kappa / omega``.

    The omega-only proportionality constant is dropped.
    """
    value, _ = marginal_loglik_grad(k, y, np.atleast_2d(omega))
    return value


def marginal_loglik_grad(k, y, omegas):
    """Average over rows of ``omegas`` of the marginal log-density and its K-gradient."""
    omegas = np.atleast_2d(np.asarray(omegas, dtype=float))
    n_samples, n = omegas.shape
    l = _noisy_factor(k, omegas)
    z = kappa(y)[None, :] / omegas
    alpha = chol_solve(l, z)
    quad = np.einsum("li,li->l", z, alpha)
    values = -0.5 * quad - 0.5 * chol_logdet(l) - 0.5 * n * np.log(2.0 * np.pi)
    inv = chol_solve(l, np.broadcast_to(np.eye(n), (n_samples, n, n)))
    g = 0.5 * (np.einsum("li,lj->ij", alpha, alpha) - inv.sum(axis=0))
    return float(values.mean()), g / n_samples


def predictive_posterior(k, y, omega, k_star, k_ss, return_cache=False):
    """Gaussian predictive moments of ``f*`` given omega.

    Parameters
    ----------
    k : (N, N) training Gram matrix.
    y : (N,) routing labels.
    omega : (N,) or (L, N) Polya-Gamma values.
    k_star : (N, T) cross-kernel between training and test points.
    k_ss : (T,) prior variances at the test points.

    Returns
    -------
    mu, var : arrays shaped (T,) for a single omega vector, else (L, T).
    """
    single = np.ndim(omega) == 1
    omegas = np.atleast_2d(np.asarray(omega, dtype=float))
    l = _noisy_factor(k, omegas)
    z = kappa(y)[None, :] / omegas
    a = chol_solve(l, z)                                        # (L, N)
    b = chol_solve(l, np.broadcast_to(k_star, (omegas.shape[0],) + k_star.shape))  # (L, N, T)
    mu = np.einsum("nt,ln->lt", k_star, a)
    var = np.asarray(k_ss)[None, :] - np.einsum("nt,lnt->lt", k_star, b)
    var = np.clip(var, _VAR_FLOOR, None)
    if return_cache:
        return mu, var, (a, b)
    if single:
        return mu[0], var[0]
    return mu, var


def predictive_posterior_backward(k_star, cache, g_mu, g_var):
    """Gradients of ``sum(g_mu * mu + g_var * var)`` w.r.t. K and k_star.

    ``cache`` comes from ``predictive_posterior(..., return_cache=True)``;
    ``g_mu`` and ``g_var`` are shaped (L, T).  Prior variances are constant
    for the RBF kernel and get no gradient.
    """
    a, b = cache
    bg = np.einsum("lnt,lt->ln", b, g_mu)
    g_k = -np.einsum("ln,lm->nm", bg, a) + np.einsum("lnt,lt,lmt->nm", b, g_var, b)
    g_ks = np.einsum("ln,lt->nt", a, g_mu) - 2.0 * np.einsum("lnt,lt->nt", b, g_var)
    return g_k, g_ks


@lru_cache(maxsize=None)
def gauss_hermite(degree: int):
    """Nodes and weights for integrals against ``exp(-x^2)``."""
    x, w = np.polynomial.hermite.hermgauss(degree)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def predictive_bernoulli(mu, var, gh_degree: int = 20):
    """``E[sigmoid(f)]`` for ``f ~ N(mu, var)`` by Gauss-Hermite quadrature."""
    mu = np.asarray(mu, dtype=float)
    var = np.asarray(var, dtype=float)
    if np.any(var < 0):
        raise ValueError("variance must be non-negative")
    x, w = gauss_hermite(gh_degree)
    f = mu[..., None] + np.sqrt(2.0 * var)[..., None] * x
    p = expit(f) @ w / np.sqrt(np.pi)
    p = np.clip(p, 1e-15, 1.0 - 1e-15)
    return p[()] if p.ndim == 0 else p


def bernoulli_loglik_grad(mu, var, label, gh_degree: int = 20):
    """``log p(label)`` for a logistic likelihood with ``f ~ N(mu, var)``.

    Returns the log-probability and its derivatives with respect to ``mu``
    and ``var``; all are derivatives of the quadrature sum itself.
    """
    mu = np.asarray(mu, dtype=float)
    var = np.asarray(var, dtype=float)
    sign = np.where(np.asarray(label) > 0.5, 1.0, -1.0)
    x, w = gauss_hermite(gh_degree)
    w = w / np.sqrt(np.pi)
    s = np.sqrt(2.0 * var)
    f = sign[..., None] * (mu[..., None] + s[..., None] * x)
    sig = expit(f)
    dsig = sig * (1.0 - sig)
    p = np.maximum(sig @ w, 1e-300)
    dp_dmu = sign * (dsig @ w)
    with np.errstate(divide="ignore", invalid="ignore"):
        dp_dvar = sign * (dsig @ (w * x)) / s
    # var -> 0 limit of the quadrature derivative: 0.5 * g''(mu) * sum(w x^2) * 2
    zero = s == 0
    if np.any(zero):
        g2 = dsig[..., 0] * (1.0 - 2.0 * sig[..., 0])
        dp_dvar = np.where(zero, 0.5 * g2, dp_dvar)
    return np.log(p), dp_dmu / p, dp_dvar / p
