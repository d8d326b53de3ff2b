"""Symmetric positive (semi)definite solves with one-shot diagonal jitter."""
from __future__ import annotations

import logging

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

log = logging.getLogger(__name__)


class FactorizationError(LinAlgError):
    pass


def _try_cholesky(A):
    try:
        c, lower = cho_factor(A, lower=True, check_finite=True)
    except LinAlgError:
        return None
    d = np.abs(np.diag(c))
    if d.min() <= 0:
        return None
    return (c, lower), float((d.max() / d.min()) ** 2)


def spd_factor(A, jitter: float, cond_limit: float, what: str = "matrix"):
    """Cholesky-factor a symmetric matrix.

    If the plain factorization fails or its condition estimate exceeds
    ``cond_limit``, ``jitter * trace / n`` is added to the diagonal and the
    factorization retried once.  Returns ``(factor, jitter_added)``.
    """
    A = np.asarray(A, dtype=float)
    A = 0.5 * (A + A.T)
    n = A.shape[0]
    res = _try_cholesky(A)
    if res is not None and res[1] <= cond_limit:
        return res[0], 0.0
    eps = jitter * max(np.trace(A), 0.0) / n
    if eps <= 0:
        eps = jitter
    res = _try_cholesky(A + eps * np.eye(n))
    if res is None:
        raise FactorizationError(f"{what} ({n}x{n}) not positive definite even after jitter {eps:.3g}")
    log.debug("%s: added diagonal jitter %.3g", what, eps)
    return res[0], eps


def spd_solve(A, B, jitter: float = 1e-10, cond_limit: float = 1e12, what: str = "matrix"):
    factor, _ = spd_factor(A, jitter, cond_limit, what)
    return cho_solve(factor, B, check_finite=False)
