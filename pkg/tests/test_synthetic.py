import numpy as np
import pytest

from qprune.errors import ConfigError
from qprune.synthetic import correlated_features, generate_model, ill_conditioned_instance, random_instance
from qprune.tensor import load_manifest, read_tensor


def test_rho_zero_is_uncorrelated():
    x = correlated_features(4096, 16, 0.0, np.random.default_rng(0)).astype(np.float64)
    cov = np.cov(x, rowvar=False)
    off = cov[~np.eye(16, dtype=bool)]
    # CLT: sample covariance of independent N(0,1) pairs has sd 1/sqrt(4096) ~ 0.016
    assert np.max(np.abs(off)) <= 0.1


def test_rho_sets_off_diagonal():
    x = correlated_features(20000, 8, 0.6, np.random.default_rng(1)).astype(np.float64)
    cov = np.cov(x, rowvar=False)
    assert np.allclose(cov[~np.eye(8, dtype=bool)], 0.6, atol=0.05)
    assert np.allclose(np.diag(cov), 1.0, atol=0.05)


def test_bad_rho():
    with pytest.raises(ConfigError):
        correlated_features(10, 3, 1.0, np.random.default_rng(0))


def test_generated_manifest_is_valid(tmp_path):
    model, calib = generate_model(tmp_path, layers=3, dims=[10, 8, 6, 4], rows=50)
    m = load_manifest(model)
    assert [(l.rows, l.cols) for l in m.layers] == [(10, 8), (8, 6), (6, 4)]
    assert [l.activation for l in m.layers] == ["relu", "relu", "identity"]
    assert read_tensor(calib).shape == (50, 10)
    with pytest.raises(ConfigError):
        generate_model(tmp_path / "x", layers=2, dims=[4, 4])


def test_random_instance_conditioning():
    for seed in range(10):
        inst = random_instance(32, seed)
        assert inst.condition_number <= 1e3
        assert np.array_equal(inst.hessian, inst.hessian.T)
    a, b = random_instance(8, 3), random_instance(8, 3)
    assert np.array_equal(a.hessian, b.hessian) and np.array_equal(a.w, b.w)


def test_ill_conditioned_instance():
    inst = ill_conditioned_instance(32, 0, condition=1e6)
    assert inst.condition_number == pytest.approx(1e6, rel=1e-3)
