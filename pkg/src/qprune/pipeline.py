"""Layer-by-layer pruning with batched column-QP weight reconstruction.

For each layer in manifest order:

1. accumulate ``H = X^T X`` from the current (already pruned upstream)
   activations, one calibration sequence at a time, then damp it;
2. select or load the mask;
3. solve the column problems in batches of ``batch_cols`` columns;
4. skip the update if too few columns converged or the layer error got worse;
5. store ``M * (W + dW)``;
6. push the activations through the stored layer for the next one.
"""

from __future__ import annotations

import json
import logging
import os
import re
import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import mask as masklib
from .errors import ConfigError, ShapeError, SingularError
from .hessian import DEFAULT_DAMPING, HessianAccumulator
from .oracle import expand, solve_direct
from .qp_build import build_batch, reduce
from .solver import (
    BASELINE_LR_GRID,
    STEP_SAFETY,
    SolverConfig,
    Status,
    estimate_lipschitz,
    solve_baseline_momentum,
    solve_batch,
)
from .tensor import (
    DenseMatrix,
    LayerSpec,
    ModelManifest,
    apply_activation,
    iter_row_chunks,
    load_layer_weights,
    load_manifest,
    read_tensor,
    save_manifest,
    write_tensor,
)

log = logging.getLogger(__name__)

SELECTORS = ("magnitude", "wanda", "file")
UPDATES = ("qp", "none", "baseline-momentum")
SOLVER_KINDS = ("iterative", "direct")
THREADS_ENV = "QPRUNE_THREADS"


@dataclass(frozen=True)
class RunConfig:
    model: Path
    calib: Path
    out: Path
    sparsity: float = 0.5
    pattern: str = "unstructured"
    selector: str = "magnitude"
    mask_file: Path | None = None
    update: str = "qp"
    solver: SolverConfig = field(default_factory=SolverConfig)
    solver_kind: str = "iterative"
    # columns with at most this many inputs use the direct solve; None = never
    direct_max_dim: int | None = None
    damping: float = DEFAULT_DAMPING
    batch_cols: int = 512
    skip_threshold: float = 0.5
    seq_len: int | None = None
    baseline_steps: int = 1000
    seed: int = 0
    threads: int | None = None
    # also write each layer's damped Hessian (as float32) next to its weights
    dump_hessian: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.sparsity < 1.0:
            raise ConfigError(f"sparsity must be in [0, 1), got {self.sparsity}")
        masklib.parse_pattern(self.pattern)
        if self.selector not in SELECTORS:
            raise ConfigError(f"selector must be one of {SELECTORS}, got {self.selector!r}")
        if (self.selector == "file") != (self.mask_file is not None):
            raise ConfigError("--mask-file is required with, and only valid with, --selector file")
        if self.update not in UPDATES:
            raise ConfigError(f"update must be one of {UPDATES}, got {self.update!r}")
        if self.solver_kind not in SOLVER_KINDS:
            raise ConfigError(f"solver must be one of {SOLVER_KINDS}, got {self.solver_kind!r}")
        if self.damping < 0:
            raise ConfigError("damping must be non-negative")
        if self.batch_cols < 1:
            raise ConfigError("batch_cols must be at least 1")
        if not 0.0 < self.skip_threshold <= 1.0:
            raise ConfigError(f"skip threshold must be in (0, 1], got {self.skip_threshold}")
        if self.seq_len is not None and self.seq_len < 1:
            raise ConfigError("seq_len must be positive")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be positive")

    def echo(self) -> dict:
        """Config as written to the run report (worker count deliberately left out)."""
        d = asdict(self)
        d.pop("threads")
        for key in ("model", "calib", "out", "mask_file"):
            d[key] = None if d[key] is None else str(d[key])
        return d


@dataclass
class LayerReport:
    name: str
    initial_error: float
    final_error: float
    skipped: bool
    skip_reason: str | None
    converged_fraction: float
    iterations_p50: int
    iterations_p95: int
    sparsity_achieved: float

    @property
    def ratio_degenerate(self) -> bool:
        return self.initial_error == 0.0

    def to_json(self) -> dict:
        d = asdict(self)
        d["ratio"] = relative_error_ratio(self)
        d["ratio_degenerate"] = self.ratio_degenerate
        return d


def layer_error(y_dense, y_pruned) -> float:
    """Mean squared difference over all entries, in float64."""
    a = np.asarray(y_dense, dtype=np.float64)
    b = np.asarray(y_pruned, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"output shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    diff = a - b
    return float(np.mean(diff * diff))


def relative_error_ratio(report: LayerReport) -> float:
    """``final_error / initial_error``; 1.0 when the zeroing error is itself zero."""
    if report.initial_error == 0.0:
        return 1.0
    return report.final_error / report.initial_error


def resolve_threads(threads: int | None) -> int:
    if threads is not None:
        return threads
    env = os.environ.get(THREADS_ENV)
    if not env:
        return 1
    try:
        n = int(env)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {env!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {env!r}")
    return n


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)


def _select_mask(cfg: RunConfig, layer: LayerSpec, w: np.ndarray, acc: HessianAccumulator, n_layers: int) -> np.ndarray:
    if not layer.prune:
        return np.ones(w.shape, dtype=bool)
    if cfg.selector == "file":
        path = Path(cfg.mask_file)
        if path.is_dir():
            path = path / f"{_safe_name(layer.name)}.qptn"
        elif n_layers > 1:
            raise ConfigError("a single --mask-file only works for one-layer models; pass a directory of <layer>.qptn")
        return masklib.load_mask(path, w.shape)
    if cfg.selector == "wanda":
        rule = masklib.ScoreRule("input_scaled", acc.feature_norms())
    else:
        rule = masklib.ScoreRule("magnitude")
    scores = masklib.score(w, rule)
    nm = masklib.parse_pattern(cfg.pattern)
    if nm is None:
        return masklib.select_unstructured(scores, cfg.sparsity)
    return masklib.select_nm(scores, *nm)


def _qp_updates(cfg: RunConfig, h: np.ndarray, w: np.ndarray, mask: np.ndarray, threads: int):
    """Column updates (d x c), per-column iteration counts and converged flags."""
    d, c = w.shape
    starts = range(0, c, cfg.batch_cols)
    direct = cfg.solver_kind == "direct" or (cfg.direct_max_dim is not None and d <= cfg.direct_max_dim)
    lipschitz = None if direct else estimate_lipschitz(h, cfg.solver.power_iters, safety=STEP_SAFETY)

    def run(start: int):
        batch = build_batch(h, w, mask, range(start, min(start + cfg.batch_cols, c)))
        if direct:
            deltas, its, conv = [], [], []
            for b in range(len(batch)):
                pruned = np.flatnonzero(batch.fixed[b])
                try:
                    deltas.append(expand(solve_direct(reduce(h, batch.w[b], pruned)), batch.w[b], pruned))
                    conv.append(True)
                except SingularError:
                    deltas.append(batch.zero_point()[b])
                    conv.append(False)
                its.append(0)
            return np.array(deltas), np.array(its), np.array(conv)
        results = solve_batch(batch, cfg.solver, lipschitz=lipschitz)
        return (
            np.array([r.delta for r in results]),
            np.array([r.iterations for r in results]),
            np.array([r.status is Status.CONVERGED for r in results]),
        )

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    delta = np.concatenate([p[0] for p in parts]).T
    iters = np.concatenate([p[1] for p in parts])
    conv = np.concatenate([p[2] for p in parts])
    return delta, iters, conv


def _baseline_updates(cfg: RunConfig, h: np.ndarray, w: np.ndarray, mask: np.ndarray):
    d, c = w.shape
    delta = np.empty_like(w)
    for j in range(c):
        pruned = np.flatnonzero(~mask[:, j])
        red = reduce(h, w[:, j], pruned)
        z = solve_baseline_momentum(red, BASELINE_LR_GRID, cfg.baseline_steps)
        delta[:, j] = expand(z, w[:, j], pruned)
    return delta


def prune_layer(cfg: RunConfig, layer: LayerSpec, x: np.ndarray, w32: np.ndarray, n_layers: int = 1, threads: int = 1):
    """Prune one layer given its input activations ``x`` (float32, tokens x d_in).

    Returns ``(stored float32 weights, mask, report, damped Hessian)``.
    """
    acc = HessianAccumulator(layer.rows)
    for seq in iter_row_chunks(x, cfg.seq_len):
        acc.accumulate(seq)
    h = acc.finalize(cfg.damping)
    w = w32.astype(np.float64)
    mask = _select_mask(cfg, layer, w, acc, n_layers)

    zeroed32 = np.where(mask, w32, np.float32(0))
    iters = np.zeros(0, dtype=np.int64)
    conv_frac = 1.0
    if not layer.prune or cfg.update == "none":
        stored = zeroed32
    else:
        if cfg.update == "qp":
            delta, iters, conv = _qp_updates(cfg, h, w, mask, threads)
            conv_frac = float(np.mean(conv)) if conv.size else 1.0
        else:
            delta = _baseline_updates(cfg, h, w, mask)
        stored = np.where(mask, w + delta, 0.0).astype(np.float32)

    x64 = x.astype(np.float64)
    y_dense = x64 @ w
    initial = layer_error(y_dense, x64 @ zeroed32.astype(np.float64))
    final = layer_error(y_dense, x64 @ stored.astype(np.float64))

    skip_reason = None
    if not layer.prune:
        skip_reason = "layer opted out of pruning"
    elif cfg.update != "none":
        if conv_frac < cfg.skip_threshold:
            skip_reason = f"only {conv_frac:.3f} of columns converged (threshold {cfg.skip_threshold})"
        elif final > initial:
            skip_reason = "update increased the layer error"
    if skip_reason is not None and layer.prune:
        stored = zeroed32
        final = initial
        log.info("%s: skipped (%s)", layer.name, skip_reason)

    report = LayerReport(
        name=layer.name,
        initial_error=initial,
        final_error=final,
        skipped=skip_reason is not None,
        skip_reason=skip_reason,
        converged_fraction=conv_frac,
        iterations_p50=int(np.percentile(iters, 50, method="lower")) if iters.size else 0,
        iterations_p95=int(np.percentile(iters, 95, method="lower")) if iters.size else 0,
        sparsity_achieved=float(np.mean(stored == 0)),
    )
    return stored, mask, report, h


def _totals(reports: list[LayerReport]) -> dict:
    ratios = np.array([relative_error_ratio(r) for r in reports])
    return {
        "layers": len(reports),
        "skipped": sum(r.skipped for r in reports),
        "improved": int(np.sum(ratios < 1.0)),
        "geomean_ratio": float(np.exp(np.mean(np.log(np.maximum(ratios, 1e-300))))),
        "mean_sparsity": float(np.mean([r.sparsity_achieved for r in reports])),
    }


def prune_model(cfg: RunConfig) -> tuple[ModelManifest, list[LayerReport]]:
    """Run the full pipeline and write weights, masks, manifest and report under ``cfg.out``.

    Outputs are staged in a temporary directory inside ``cfg.out`` and only
    moved into place once every layer succeeded.
    """
    threads = resolve_threads(cfg.threads)
    manifest = load_manifest(cfg.model)
    calib = read_tensor(cfg.calib)
    first = manifest.layers[0]
    if calib.cols != first.rows:
        raise ConfigError(f"calibration has {calib.cols} features, layer {first.name!r} expects {first.rows}")

    out = Path(cfg.out)
    created_out = not out.exists()
    out.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=out))
    try:
        x = np.array(calib.values)
        new_layers, reports = [], []
        for i, layer in enumerate(manifest.layers):
            w32 = np.array(load_layer_weights(manifest, layer).values)
            stored, mask, report, h = prune_layer(cfg, layer, x, w32, len(manifest), threads)
            log.info("%s: ratio %.4f", layer.name, relative_error_ratio(report))
            fname = f"{i:03d}_{_safe_name(layer.name)}"
            write_tensor(staging / f"{fname}.qptn", DenseMatrix.from_array(stored))
            masklib.save_mask(staging / f"{fname}.mask.qptn", mask)
            if cfg.dump_hessian:
                write_tensor(staging / f"{fname}.hessian.qptn", DenseMatrix.from_array(h))
            new_layers.append(LayerSpec(layer.name, layer.rows, layer.cols, f"{fname}.qptn", layer.activation, layer.prune))
            reports.append(report)
            x = apply_activation((x.astype(np.float64) @ stored.astype(np.float64)).astype(np.float32), layer.activation)

        pruned = ModelManifest(tuple(new_layers), base_dir=out)
        save_manifest(staging / "model.json", pruned)
        doc = {"layers": [r.to_json() for r in reports], "config": cfg.echo(), "totals": _totals(reports)}
        (staging / "report.json").write_text(json.dumps(doc, indent=2) + "\n")
        for item in sorted(staging.iterdir()):
            os.replace(item, out / item.name)
        staging.rmdir()
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        if created_out:
            shutil.rmtree(out, ignore_errors=True)
        raise
    return pruned, reports
