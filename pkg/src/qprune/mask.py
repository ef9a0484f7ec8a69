"""Pruning-mask selection.

Masks are boolean arrays congruent to the weight matrix: ``True`` keeps a
weight, ``False`` prunes it. Comparison groups run down each column (the input
dimension), matching the column-wise structure of the reconstruction problems.
Ties are always broken by pruning the lower row index first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError
from .tensor import DenseMatrix, read_tensor, write_tensor

SCORE_KINDS = ("magnitude", "input_scaled")


@dataclass(frozen=True)
class ScoreRule:
    kind: str = "magnitude"
    feature_norms: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.kind not in SCORE_KINDS:
            raise ConfigError(f"unknown score rule {self.kind!r}")
        if self.feature_norms is not None and np.any(np.asarray(self.feature_norms) < 0):
            raise ConfigError("feature norms must be non-negative")


def score(w, rule: ScoreRule) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    s = np.abs(w)
    if rule.kind == "input_scaled":
        if rule.feature_norms is None:
            raise ConfigError("input_scaled scores need feature_norms")
        norms = np.asarray(rule.feature_norms, dtype=np.float64)
        if norms.shape != (w.shape[0],):
            raise ConfigError(f"feature_norms has shape {norms.shape}, expected ({w.shape[0]},)")
        s = s * norms[:, None]
    return s


def _check_scores(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ShapeError(f"scores must be 2-D, got ndim={scores.ndim}")
    if np.any(scores < 0) or not np.all(np.isfinite(scores)):
        raise ValidationError("scores must be finite and non-negative")
    return scores


def select_unstructured(scores, sparsity: float) -> np.ndarray:
    """Prune the ``floor(sparsity * rows)`` lowest-scoring entries of every column."""
    if not 0.0 <= sparsity < 1.0:
        raise ConfigError(f"sparsity must be in [0, 1), got {sparsity}")
    scores = _check_scores(scores)
    rows, cols = scores.shape
    k = int(np.floor(sparsity * rows))
    mask = np.ones((rows, cols), dtype=bool)
    if k:
        order = np.argsort(scores, axis=0, kind="stable")
        np.put_along_axis(mask, order[:k], False, axis=0)
    return mask


def select_nm(scores, n: int, m: int) -> np.ndarray:
    """Keep the ``n`` largest scores in every aligned group of ``m`` rows, per column."""
    if not 0 < n < m:
        raise ConfigError(f"N:M pattern needs 0 < N < M, got {n}:{m}")
    scores = _check_scores(scores)
    rows, cols = scores.shape
    if rows % m:
        raise ShapeError(f"{rows} rows are not divisible by M={m}")
    groups = scores.reshape(rows // m, m, cols)
    order = np.argsort(groups, axis=1, kind="stable")
    mask = np.ones_like(groups, dtype=bool)
    np.put_along_axis(mask, order[:, : m - n], False, axis=1)
    return mask.reshape(rows, cols)


def parse_pattern(pattern: str) -> tuple[int, int] | None:
    """``"unstructured"`` -> ``None``; ``"2:4"`` -> ``(2, 4)``."""
    if pattern == "unstructured":
        return None
    try:
        n, m = (int(p) for p in pattern.split(":"))
    except ValueError:
        raise ConfigError(f"pattern must be 'unstructured' or 'N:M', got {pattern!r}") from None
    if not 0 < n < m:
        raise ConfigError(f"N:M pattern needs 0 < N < M, got {pattern!r}")
    return n, m


def as_mask(a, shape: tuple[int, int] | None = None) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got ndim={a.ndim}")
    if shape is not None and a.shape != tuple(shape):
        raise ShapeError(f"mask shape {a.shape} does not match weights {tuple(shape)}")
    if a.dtype != np.bool_:
        if not np.all((a == 0) | (a == 1)):
            raise ValidationError("mask entries must be exactly 0 or 1")
        a = a == 1
    return a


def load_mask(path, shape: tuple[int, int] | None = None) -> np.ndarray:
    return as_mask(read_tensor(path).values, shape)


def save_mask(path, mask) -> None:
    write_tensor(path, DenseMatrix.from_array(as_mask(mask).astype(np.float32)))


def zeros_per_column(mask) -> np.ndarray:
    return np.count_nonzero(~as_mask(mask), axis=0)


def check_nm(mask, n: int, m: int) -> bool:
    mask = as_mask(mask)
    rows, cols = mask.shape
    if rows % m:
        return False
    kept = mask.reshape(rows // m, m, cols).sum(axis=1)
    return bool(np.all(kept == n))
