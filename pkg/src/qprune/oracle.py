"""Closed-form solution of the reduced column QP.

Stationarity of ``z^T Q z + c^T z`` gives ``2 Q z = -c``; with ``Q`` positive
definite this has the unique solution ``z = H_II^{-1} H_IS w_S``.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import ShapeError, SingularError
from .qp_build import ColumnQpBatch, ReducedQp, reduce, split_indices

FALLBACK_DAMPING = 1e-2


def solve_direct(reduced: ReducedQp, fallback_damping: float = FALLBACK_DAMPING) -> np.ndarray:
    """Minimize the reduced objective by Cholesky factorization.

    If ``Q`` is not numerically positive definite, ``10 * fallback_damping *
    mean(diag(Q))`` is added to the diagonal once before giving up with
    :class:`SingularError`.
    """
    q, c = reduced.q, reduced.c
    if q.shape[0] == 0:
        return np.zeros(0)
    if not np.any(c):
        return np.zeros_like(c)
    try:
        factor = scipy.linalg.cho_factor(q, lower=True, check_finite=True)
    except np.linalg.LinAlgError:
        shift = 10.0 * fallback_damping * float(np.mean(np.diag(q)))
        if not shift > 0:
            raise SingularError("reduced Hessian is singular and has no diagonal to damp") from None
        try:
            factor = scipy.linalg.cho_factor(q + shift * np.eye(q.shape[0]), lower=True)
        except np.linalg.LinAlgError:
            raise SingularError("reduced Hessian is singular even after extra damping") from None
    return scipy.linalg.cho_solve(factor, -0.5 * c)


def expand(delta_i, w_col, pruned_idx) -> np.ndarray:
    """Scatter a kept-set update back to a full-length update with ``dw[S] = -w[S]``."""
    w_col = np.asarray(w_col, dtype=np.float64)
    kept, pruned = split_indices(w_col.shape[0], pruned_idx)
    delta_i = np.asarray(delta_i, dtype=np.float64)
    if delta_i.shape != kept.shape:
        raise ShapeError(f"expected {kept.size} kept entries, got {delta_i.shape}")
    out = np.empty_like(w_col)
    out[kept] = delta_i
    out[pruned] = -w_col[pruned]
    return out


def partition(delta, pruned_idx) -> np.ndarray:
    """Inverse of :func:`expand` for feasible updates: return the kept-set entries."""
    delta = np.asarray(delta, dtype=np.float64)
    kept, _ = split_indices(delta.shape[0], pruned_idx)
    return delta[kept]


def solve_column(h, w_col, pruned_idx) -> np.ndarray:
    red = reduce(h, w_col, pruned_idx)
    return expand(solve_direct(red), w_col, pruned_idx)


def solve_batch_direct(batch: ColumnQpBatch) -> np.ndarray:
    """Oracle solutions for every column of ``batch``, stacked row-wise like ``batch.w``."""
    out = np.empty_like(batch.w)
    for b in range(len(batch)):
        pruned = np.flatnonzero(batch.fixed[b])
        out[b] = solve_column(batch.hessian, batch.w[b], pruned)
    return out
