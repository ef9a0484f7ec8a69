"""Seeded synthetic models, calibration data and QP instances."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .hessian import DEFAULT_DAMPING, HessianAccumulator
from .mask import select_unstructured
from .tensor import DenseMatrix, LayerSpec, ModelManifest, save_manifest, write_tensor


def correlated_features(rows: int, dim: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Rows ``x = A z`` with ``z ~ N(0, I)`` and ``A A^T = (1 - rho) I + rho 11^T``."""
    if not 0.0 <= rho < 1.0:
        raise ConfigError(f"correlation must be in [0, 1), got {rho}")
    cov = (1.0 - rho) * np.eye(dim) + rho * np.ones((dim, dim))
    a = np.linalg.cholesky(cov)
    z = rng.standard_normal((rows, dim))
    return (z @ a.T).astype(np.float32)


def generate_model(
    out_dir,
    layers: int = 4,
    dims=128,
    rho: float = 0.6,
    rows: int = 4096,
    seed: int = 0,
    activation: str = "relu",
) -> tuple[Path, Path]:
    """Write ``model.json``, one weight file per layer and ``calib.qptn``.

    ``dims`` is either one width for every layer boundary or the full list of
    ``layers + 1`` widths. Hidden layers use ``activation``; the last layer is
    linear. Returns ``(manifest path, calibration path)``.
    """
    widths = [int(dims)] * (layers + 1) if np.isscalar(dims) else [int(d) for d in dims]
    if layers < 1 or len(widths) != layers + 1:
        raise ConfigError(f"need {layers + 1} widths for {layers} layers, got {widths}")
    if min(widths) < 2:
        raise ConfigError("every width must be at least 2")
    if rows < 1:
        raise ConfigError("rows must be positive")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    calib = correlated_features(rows, widths[0], rho, rng)
    specs = []
    for i in range(layers):
        d_in, d_out = widths[i], widths[i + 1]
        w = (rng.standard_normal((d_in, d_out)) / np.sqrt(d_in)).astype(np.float32)
        fname = f"layer{i}.qptn"
        write_tensor(out / fname, DenseMatrix.from_array(w))
        act = activation if i < layers - 1 else "identity"
        specs.append(LayerSpec(f"layer{i}", d_in, d_out, fname, act))
    manifest = ModelManifest(tuple(specs), base_dir=out)
    save_manifest(out / "model.json", manifest)
    write_tensor(out / "calib.qptn", DenseMatrix.from_array(calib))
    return out / "model.json", out / "calib.qptn"


@dataclass(frozen=True)
class QpInstance:
    hessian: np.ndarray
    w: np.ndarray
    mask: np.ndarray
    seed: int

    @property
    def condition_number(self) -> float:
        ev = np.linalg.eigvalsh(self.hessian)
        return float(ev[-1] / ev[0])


def random_instance(
    dim: int,
    seed: int,
    cols: int = 8,
    rows: int = 4096,
    sparsity: float = 0.5,
    damping: float = DEFAULT_DAMPING,
    max_condition: float | None = 1e3,
) -> QpInstance:
    """One column-QP instance built the way the pipeline builds it.

    ``H`` is the damped Gram matrix of ``rows`` correlated calibration rows
    (random correlation strength); columns use a per-column magnitude mask.
    Correlation is halved until ``cond(H) <= max_condition``.
    """
    rng = np.random.default_rng(seed)
    rho = rng.uniform(0.0, 0.9)
    mix = np.eye(dim) + rng.standard_normal((dim, dim)) * rng.uniform(0.0, 0.5) / np.sqrt(dim)
    w = rng.standard_normal((dim, cols)) / np.sqrt(dim)
    feature_seed = int(rng.integers(2**32))
    while True:
        x = correlated_features(rows, dim, rho, np.random.default_rng(feature_seed))
        x = (x.astype(np.float64) @ mix).astype(np.float32)
        h = HessianAccumulator(dim).accumulate(x).finalize(damping)
        inst = QpInstance(h, w, select_unstructured(np.abs(w), sparsity), seed)
        if max_condition is None or inst.condition_number <= max_condition or rho < 1e-3:
            return inst
        rho *= 0.5


def ill_conditioned_instance(dim: int, seed: int, condition: float = 1e6, cols: int = 4, sparsity: float = 0.5) -> QpInstance:
    """Hessian with a log-spaced spectrum spanning ``condition`` and a random eigenbasis."""
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    eig = np.logspace(0.0, np.log10(condition), dim)
    h = (q * eig) @ q.T
    h = 0.5 * (h + h.T)
    w = rng.standard_normal((dim, cols))
    return QpInstance(h, w, select_unstructured(np.abs(w), sparsity), seed)
