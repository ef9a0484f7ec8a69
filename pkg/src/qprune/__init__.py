"""Post-training pruning with optimal per-column weight reconstruction.

Each output column of a pruned linear layer is repaired by solving a small
convex QP over its surviving weights, batched across columns on a shared
Hessian built from calibration activations.
"""

from .errors import (
    ConfigError,
    EmptyCalibrationError,
    FormatError,
    QPruneError,
    ShapeError,
    SingularError,
    TruncatedFileError,
    ValidationError,
)
from .hessian import HessianAccumulator
from .oracle import solve_batch_direct, solve_direct
from .pipeline import LayerReport, RunConfig, prune_layer, prune_model, relative_error_ratio
from .qp_build import ColumnQpBatch, ReducedQp, build_batch, objective, reduce
from .solver import SolveResult, SolverConfig, Status, estimate_lipschitz, solve_baseline_momentum, solve_batch
from .tensor import DenseMatrix, LayerSpec, ModelManifest, read_tensor, write_tensor

__version__ = "0.1.0"

__all__ = [
    "ColumnQpBatch",
    "ConfigError",
    "DenseMatrix",
    "EmptyCalibrationError",
    "FormatError",
    "HessianAccumulator",
    "LayerReport",
    "LayerSpec",
    "ModelManifest",
    "QPruneError",
    "ReducedQp",
    "RunConfig",
    "ShapeError",
    "SingularError",
    "SolveResult",
    "SolverConfig",
    "Status",
    "TruncatedFileError",
    "ValidationError",
    "build_batch",
    "estimate_lipschitz",
    "objective",
    "prune_layer",
    "prune_model",
    "read_tensor",
    "reduce",
    "relative_error_ratio",
    "solve_baseline_momentum",
    "solve_batch",
    "solve_batch_direct",
    "solve_direct",
    "write_tensor",
]
