"""Column-wise reconstruction QPs sharing one Hessian.

For weight column ``w`` and pruned index set ``S`` the update ``dw`` solves::

    minimize  dw^T H dw   subject to  dw[i] = -w[i]  for i in S

Equalities are encoded as tight bounds ``lower[i] == upper[i] == -w[i]``; free
coordinates get the sentinel bounds ``-FREE_BOUND`` / ``+FREE_BOUND`` (the
largest finite float64), which projection treats as a no-op.

Eliminating the fixed coordinates gives the reduced problem over the kept set
``I`` (kept in original index order)::

    minimize  z^T Q z + c^T z + const,   Q = H[I, I],  c = -2 H[I, S] w[S],
                                          const = w[S]^T H[S, S] w[S]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

FREE_BOUND = float(np.finfo(np.float64).max)


def hess_apply(h: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Row-wise ``H @ x[b]`` for a stack of vectors ``x`` of shape (B, d).

    Every row goes through the same matrix-vector kernel, so a row's result
    does not depend on which other rows share the batch (a plain GEMM does).
    """
    return np.matmul(h, x[:, :, None])[:, :, 0]


def objective(h, delta) -> float:
    """``delta^T H delta`` in float64."""
    h = np.asarray(h, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if h.shape != (delta.shape[0], delta.shape[0]):
        raise ShapeError(f"hessian {h.shape} does not match vector of length {delta.shape[0]}")
    return float(delta @ (h @ delta))


def batch_objective(h: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.einsum("bi,bi->b", x, hess_apply(h, x))


@dataclass(frozen=True)
class ColumnProblem:
    column: int
    w: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    pruned_idx: np.ndarray

    @property
    def zero_point(self) -> np.ndarray:
        z = np.zeros_like(self.w)
        z[self.pruned_idx] = -self.w[self.pruned_idx]
        return z


@dataclass(frozen=True)
class ColumnQpBatch:
    """A stack of column problems sharing ``hessian``.

    Per-column arrays are stored row-wise: ``w[b]`` is the original weight
    column ``columns[b]``.
    """

    hessian: np.ndarray
    columns: np.ndarray
    w: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    fixed: np.ndarray

    def __len__(self) -> int:
        return len(self.columns)

    @property
    def dim(self) -> int:
        return self.hessian.shape[0]

    def zero_point(self) -> np.ndarray:
        """The feasible update that only zeroes pruned weights."""
        return np.where(self.fixed, -self.w, 0.0)

    def problem(self, b: int) -> ColumnProblem:
        return ColumnProblem(
            column=int(self.columns[b]),
            w=self.w[b],
            lower=self.lower[b],
            upper=self.upper[b],
            pruned_idx=np.flatnonzero(self.fixed[b]),
        )

    @property
    def problems(self) -> list[ColumnProblem]:
        return [self.problem(b) for b in range(len(self))]

    def subset(self, rows) -> "ColumnQpBatch":
        rows = np.asarray(rows)
        return ColumnQpBatch(self.hessian, self.columns[rows], self.w[rows], self.lower[rows], self.upper[rows], self.fixed[rows])


def build_batch(h, w, mask, col_range=None) -> ColumnQpBatch:
    """Build the bound-encoded problems for columns ``col_range`` (a range/slice/index list; default all)."""
    h = np.asarray(h, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    mask = np.asarray(mask)
    if w.ndim != 2:
        raise ShapeError(f"weights must be 2-D, got ndim={w.ndim}")
    d, c = w.shape
    if h.shape != (d, d):
        raise ShapeError(f"hessian is {h.shape}, weights need ({d}, {d})")
    if mask.shape != w.shape:
        raise ShapeError(f"mask {mask.shape} does not match weights {w.shape}")
    if col_range is None:
        cols = np.arange(c)
    elif isinstance(col_range, slice):
        cols = np.arange(c)[col_range]
    else:
        cols = np.asarray(list(col_range), dtype=np.intp)
        if cols.size and (cols.min() < 0 or cols.max() >= c):
            raise ShapeError(f"column range outside [0, {c})")
    wb = np.ascontiguousarray(w[:, cols].T)
    fixed = np.ascontiguousarray(~mask[:, cols].astype(bool).T)
    lower = np.where(fixed, -wb, -FREE_BOUND)
    upper = np.where(fixed, -wb, FREE_BOUND)
    return ColumnQpBatch(h, cols, wb, lower, upper, fixed)


@dataclass(frozen=True)
class ReducedQp:
    q: np.ndarray
    c: np.ndarray
    const_term: float
    kept_idx: np.ndarray
    pruned_idx: np.ndarray

    def value(self, z) -> float:
        """Reduced objective including the constant, equal to the full objective at the expanded point."""
        z = np.asarray(z, dtype=np.float64)
        return float(z @ (self.q @ z) + self.c @ z + self.const_term)


def split_indices(d: int, pruned_idx) -> tuple[np.ndarray, np.ndarray]:
    pruned = np.zeros(d, dtype=bool)
    idx = np.asarray(pruned_idx, dtype=np.intp).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= d):
        raise ShapeError(f"pruned index outside [0, {d})")
    pruned[idx] = True
    return np.flatnonzero(~pruned), np.flatnonzero(pruned)


def reduce(h, w_col, pruned_idx) -> ReducedQp:
    h = np.asarray(h, dtype=np.float64)
    w_col = np.asarray(w_col, dtype=np.float64)
    d = w_col.shape[0]
    if h.shape != (d, d):
        raise ShapeError(f"hessian {h.shape} does not match column of length {d}")
    kept, pruned = split_indices(d, pruned_idx)
    w_s = w_col[pruned]
    q = h[np.ix_(kept, kept)]
    c = -2.0 * (h[np.ix_(kept, pruned)] @ w_s)
    const = float(w_s @ (h[np.ix_(pruned, pruned)] @ w_s))
    return ReducedQp(q=q, c=c, const_term=const, kept_idx=kept, pruned_idx=pruned)
