import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qprune.errors import ConfigError, EmptyCalibrationError, ShapeError
from qprune.hessian import HessianAccumulator, hessian_from_sequences


def _split(x, cuts):
    return np.split(x, sorted(set(cuts)))


def test_identity_gram():
    acc = HessianAccumulator(3).accumulate(np.eye(3))
    assert np.array_equal(acc.sum, np.eye(3))
    assert acc.sequences_seen == 1


def test_rank_one():
    acc = HessianAccumulator(2).accumulate([[1.0, 2.0]])
    assert acc.sum.tolist() == [[1, 2], [2, 4]]


def test_dimension_mismatch():
    with pytest.raises(ShapeError):
        HessianAccumulator(3).accumulate(np.ones((4, 2)))


def test_finalize_examples():
    acc = HessianAccumulator(2)
    acc.sum[:] = np.eye(2)
    acc.sequences_seen = 1
    assert np.array_equal(acc.finalize(0.0), np.eye(2))
    acc.sum[:] = np.diag([2.0, 4.0])
    np.testing.assert_allclose(acc.finalize(0.01), np.diag([2.03, 4.03]), rtol=0, atol=1e-15)


def test_finalize_errors():
    with pytest.raises(EmptyCalibrationError):
        HessianAccumulator(2).finalize()
    acc = HessianAccumulator(2).accumulate(np.ones((1, 2)))
    with pytest.raises(ConfigError):
        acc.finalize(-1.0)
    with pytest.raises(EmptyCalibrationError):
        hessian_from_sequences([])


def test_finalize_does_not_touch_sum(rng):
    acc = HessianAccumulator(4).accumulate(rng.standard_normal((10, 4)))
    before = acc.sum.copy()
    acc.finalize(0.5)
    assert np.array_equal(acc.sum, before)


def test_damping_shift_exact(rng):
    acc = HessianAccumulator(5).accumulate(rng.standard_normal((20, 5)))
    diff = acc.finalize(0.1) - acc.finalize(0.0)
    lam = 0.1 * np.mean(np.diag(acc.sum))
    assert np.all(diff[~np.eye(5, dtype=bool)] == 0)
    np.testing.assert_allclose(np.diag(diff), lam, rtol=1e-14)


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    rows=st.integers(1, 60),
    dim=st.integers(1, 12),
    cuts=st.lists(st.integers(0, 60), max_size=8),
)
def test_incremental_equals_stacked(seed, rows, dim, cuts):
    x = np.random.default_rng(seed).standard_normal((rows, dim)).astype(np.float32)
    acc = HessianAccumulator(dim)
    for y in _split(x, [c for c in cuts if c <= rows]):
        acc.accumulate(y)
    ref = x.astype(np.float64).T @ x.astype(np.float64)
    assert np.linalg.norm(acc.sum - ref) <= 1e-6 * max(np.linalg.norm(ref), 1e-300)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), parts=st.integers(1, 6))
def test_symmetric_and_psd(seed, parts):
    rng = np.random.default_rng(seed)
    dim = int(rng.integers(2, 10))
    acc = HessianAccumulator(dim)
    for _ in range(parts):
        acc.accumulate(rng.standard_normal((int(rng.integers(1, 8)), dim)) * rng.uniform(0.1, 10))
    assert np.array_equal(acc.sum, acc.sum.T)
    tr = np.trace(acc.sum)
    for _ in range(10):
        v = rng.standard_normal(dim)
        assert v @ acc.sum @ v >= -1e-8 * (v @ v) * tr / dim


def test_order_independence(rng):
    seqs = [rng.standard_normal((int(rng.integers(1, 20)), 6)) for _ in range(12)]
    a = HessianAccumulator(6)
    for s in seqs:
        a.accumulate(s)
    b = HessianAccumulator(6)
    for i in rng.permutation(len(seqs)):
        b.accumulate(seqs[i])
    assert np.linalg.norm(a.sum - b.sum) <= 1e-12 * np.linalg.norm(a.sum)


def test_finalize_positive_definite_100(rng):
    for _ in range(100):
        dim = int(rng.integers(2, 16))
        rows = int(rng.integers(1, 2 * dim))  # often rank deficient
        h = HessianAccumulator(dim).accumulate(rng.standard_normal((rows, dim))).finalize(1e-2)
        assert np.array_equal(h, h.T)
        np.linalg.cholesky(h)


def test_merge_matches_single(rng):
    x = rng.standard_normal((30, 4))
    a = HessianAccumulator(4).accumulate(x[:10])
    b = HessianAccumulator(4).accumulate(x[10:])
    merged = a.merge(b)
    assert merged.sequences_seen == 2
    np.testing.assert_allclose(merged.sum, x.T @ x, rtol=1e-12)
    with pytest.raises(ShapeError):
        a.merge(HessianAccumulator(3))


def test_feature_norms(rng):
    x = rng.standard_normal((25, 3))
    acc = HessianAccumulator(3).accumulate(x)
    np.testing.assert_allclose(acc.feature_norms(), np.linalg.norm(x, axis=0), rtol=1e-12)
