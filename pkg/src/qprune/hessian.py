"""Incremental accumulation of the layer Hessian ``H = X^T X``.

Calibration arrives one sequence at a time; each sequence ``y`` (tokens x d_in)
contributes ``y^T y`` to a float64 running sum, so the stacked activation matrix
is never materialized.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, EmptyCalibrationError, ShapeError

DEFAULT_DAMPING = 1e-2


class HessianAccumulator:
    """Running sum of per-sequence Gram matrices.

    The sum is kept exactly symmetric: every Gram update is symmetrized before
    it is added, and sums of symmetric float matrices stay symmetric.
    """

    def __init__(self, dim: int) -> None:
        if dim < 1:
            raise ShapeError(f"dim must be positive, got {dim}")
        self.dim = dim
        self.sum = np.zeros((dim, dim), dtype=np.float64)
        self.sequences_seen = 0

    def accumulate(self, y) -> "HessianAccumulator":
        y = np.asarray(y, dtype=np.float64)
        if y.ndim != 2 or y.shape[1] != self.dim:
            raise ShapeError(f"expected (tokens, {self.dim}) activations, got {y.shape}")
        gram = y.T @ y
        self.sum += 0.5 * (gram + gram.T)
        self.sequences_seen += 1
        return self

    def merge(self, other: "HessianAccumulator") -> "HessianAccumulator":
        if other.dim != self.dim:
            raise ShapeError(f"cannot merge dim {other.dim} into dim {self.dim}")
        self.sum += other.sum
        self.sequences_seen += other.sequences_seen
        return self

    def feature_norms(self) -> np.ndarray:
        """Per-input-feature L2 norms ``||X[:, i]||``, read off the undamped diagonal."""
        return np.sqrt(np.maximum(np.diag(self.sum), 0.0))

    def damping_shift(self, damping: float) -> float:
        return float(damping * np.mean(np.diag(self.sum)))

    def finalize(self, damping: float = DEFAULT_DAMPING) -> np.ndarray:
        """Return ``sum + lam * I`` with ``lam = damping * mean(diag(sum))`` as a new float64 array."""
        if self.sequences_seen == 0:
            raise EmptyCalibrationError("no calibration sequences accumulated")
        if damping < 0 or not np.isfinite(damping):
            raise ConfigError(f"damping must be a finite non-negative number, got {damping}")
        h = self.sum.copy()
        lam = self.damping_shift(damping)
        if lam:
            h[np.diag_indices_from(h)] += lam
        return h


def hessian_from_sequences(sequences, damping: float = DEFAULT_DAMPING) -> np.ndarray:
    it = iter(sequences)
    try:
        first = np.asarray(next(it))
    except StopIteration:
        raise EmptyCalibrationError("no calibration sequences given") from None
    acc = HessianAccumulator(first.shape[1]).accumulate(first)
    for y in it:
        acc.accumulate(y)
    return acc.finalize(damping)
