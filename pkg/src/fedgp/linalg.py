"""Cholesky helpers shared by the GP code.

Every factorization in the package goes through :func:`cholesky`, which
escalates diagonal jitter on failure and reports the factored size to any
active :class:`FactorizationLog` (used by tests to prove the sparse paths
never touch an N x N matrix).
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

__all__ = [
    "FactorizationError",
    "FactorizationLog",
    "cholesky",
    "chol_solve",
    "chol_logdet",
    "tri_solve",
]

_active_logs: list["FactorizationLog"] = []


class FactorizationError(np.linalg.LinAlgError):
    """Raised when a matrix cannot be factored even after jitter escalation."""


class FactorizationLog:
    """Context manager recording the size of every Cholesky factorization.

    >>> with FactorizationLog() as log:
    ...     _ = cholesky(np.eye(3))
    >>> log.sizes
    [3]
    """

    def __init__(self):
        self.sizes: list[int] = []

    def __enter__(self):
        _active_logs.append(self)
        return self

    def __exit__(self, *exc):
        _active_logs.remove(self)
        return False

    @property
    def max_size(self) -> int:
        return max(self.sizes, default=0)


def cholesky(a: np.ndarray, jitter: float = 0.0, max_jitter: float = 0.0) -> np.ndarray:
    """Lower Cholesky factor of ``a`` (a single matrix or a stack).

    If the plain factorization fails, ``jitter * 10**k`` is added to the
    diagonal for k = 1, 2, ... while it stays at or below ``max_jitter``.
    """
    a = np.asarray(a, dtype=float)
    n = a.shape[-1]
    for log in _active_logs:
        log.sizes.append(n)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    extra = jitter * 10.0
    eye = np.eye(n)
    while jitter > 0 and extra <= max_jitter * (1 + 1e-12):
        try:
            return np.linalg.cholesky(a + extra * eye)
        except np.linalg.LinAlgError:
            extra *= 10.0
    raise FactorizationError(f"matrix of size {n} is not positive definite after jitter escalation")


def _batched(l, b, fn):
    vec = b.ndim == l.ndim - 1
    rhs = b[..., None] if vec else b
    out = fn(l, rhs)
    return out[..., 0] if vec else out


def chol_solve(l: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``(l l^T) x = b``; ``l`` may be a stack of factors."""
    if l.ndim == 2:
        return cho_solve((l, True), b, check_finite=False)

    def solve(lf, rhs):
        return np.linalg.solve(np.swapaxes(lf, -1, -2), np.linalg.solve(lf, rhs))

    return _batched(l, np.asarray(b, dtype=float), solve)


def tri_solve(l: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``l x = b`` for lower-triangular ``l`` (stacks allowed)."""
    if l.ndim == 2:
        return solve_triangular(l, b, lower=True, check_finite=False)
    return _batched(l, np.asarray(b, dtype=float), np.linalg.solve)


def chol_logdet(l: np.ndarray) -> np.ndarray:
    return 2.0 * np.sum(np.log(np.diagonal(l, axis1=-2, axis2=-1)), axis=-1)
