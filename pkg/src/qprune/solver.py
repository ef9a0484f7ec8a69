"""First-order solvers for batched bound-constrained column QPs.

With the equality constraints folded into variable bounds there is no
constraint matrix left, so the restarted accelerated primal-dual scheme reduces
to restarted accelerated projected gradient: each iteration costs one product
with the shared Hessian per column and a clamp to the bounds.

Every column keeps its own momentum, restart clock and stopping state, so a
column's trajectory is identical whether it is solved alone or in a batch.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .qp_build import ColumnQpBatch, ReducedQp, hess_apply, objective

LIPSCHITZ_FLOOR = 1e-12
STEP_SAFETY = 1.05
BASELINE_LR_GRID = (1e-2, 1e-3, 1e-4, 1e-5)


class Status(str, enum.Enum):
    CONVERGED = "converged"
    MAX_ITERS = "max_iters"
    DEGENERATE = "degenerate"


@dataclass(frozen=True)
class SolverConfig:
    """Solver settings.

    ``restart`` is ``"adaptive"`` (restart when the objective goes up, or after
    ``cycle_cap`` iterations) or ``"fixed:K"`` (restart every K iterations).
    """

    rel_tol: float = 0.01
    abs_tol: float = 0.01
    max_iters: int = 100_000
    restart: str = "adaptive"
    power_iters: int = 50
    cycle_cap: int = 1000

    def __post_init__(self) -> None:
        if not (self.rel_tol >= 0 and self.abs_tol >= 0) or (self.rel_tol == 0 and self.abs_tol == 0):
            raise ConfigError("tolerances must be non-negative and not both zero")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be at least 1")
        if self.power_iters < 1:
            raise ConfigError("power_iters must be at least 1")
        self.restart_period()

    def restart_period(self) -> int | None:
        """``None`` for adaptive restarts, else the fixed period."""
        if self.restart == "adaptive":
            return None
        kind, _, k = self.restart.partition(":")
        if kind != "fixed" or not k.isdigit() or int(k) < 1:
            raise ConfigError(f"restart must be 'adaptive' or 'fixed:K', got {self.restart!r}")
        return int(k)


@dataclass
class SolveResult:
    delta: np.ndarray
    iterations: int
    kkt_residual: float
    status: Status
    duality_gap: float = 0.0
    restarts: int = 0
    # best objective seen so far, recorded at each restart boundary
    restart_objectives: list[float] = field(default_factory=list)


def estimate_lipschitz(h, iters: int = 50, safety: float = 1.0) -> float:
    """Power-iteration estimate of ``lambda_max(2 H)``, times ``safety``.

    The start vector is fixed, so the estimate is deterministic.
    """
    h = np.asarray(h, dtype=np.float64)
    d = h.shape[0]
    if d == 0 or not np.any(h):
        return LIPSCHITZ_FLOOR
    v = np.random.default_rng(0x5EED).standard_normal(d)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        hv = h @ v
        est = float(v @ hv)
        norm = np.linalg.norm(hv)
        if norm == 0:
            break
        v = hv / norm
    return max(2.0 * est * safety, LIPSCHITZ_FLOOR)


def projected_gradient(x: np.ndarray, g: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """Projected gradient: zero on fixed coordinates, one-sided at active bounds."""
    pg = g.copy()
    at_lo = x <= lower
    at_hi = x >= upper
    pg[at_lo] = np.minimum(g[at_lo], 0.0)
    pg[at_hi] = np.maximum(g[at_hi], 0.0)
    pg[at_lo & at_hi] = 0.0
    return pg


def kkt_terms(x: np.ndarray, hx: np.ndarray, lower: np.ndarray, upper: np.ndarray):
    """Row-wise ``(objective, dual residual, duality gap)`` for feasible ``x`` with ``hx = H x``.

    The dual residual is the infinity norm of the projected gradient. Bound
    multipliers absorb the rest of the gradient, so the primal-dual gap is
    ``|x . pg|``; on a fixed coordinate the multiplier times the bound cancels
    the gradient term exactly.
    """
    pg = projected_gradient(x, 2.0 * hx, lower, upper)
    f = np.einsum("bi,bi->b", x, hx)
    resid = np.max(np.abs(pg), axis=1, initial=0.0)
    gap = np.abs(np.einsum("bi,bi->b", x, pg))
    return f, resid, gap


def converged_mask(f, resid, gap, cfg: "SolverConfig") -> np.ndarray:
    """Relative KKT test in the style of PDLP-family solvers.

    Primal feasibility is exact (iterates are projected). The linear cost is
    zero, so the dual residual bound is ``abs_tol`` alone; the gap is held to
    ``abs_tol + rel_tol * (|primal obj| + |dual obj|)``.
    """
    dual_obj = f - gap
    return (resid <= cfg.abs_tol) & (gap <= cfg.abs_tol + cfg.rel_tol * (np.abs(f) + np.abs(dual_obj)))


def solve_batch(batch: ColumnQpBatch, cfg: SolverConfig | None = None, lipschitz: float | None = None) -> list[SolveResult]:
    """Solve every column problem in ``batch``; results are in batch order.

    Each column starts at its zeroing point and runs until :func:`converged_mask`
    accepts it, or ``max_iters``. A start point is only accepted as-is when its
    projected gradient is exactly zero. The returned update never has a larger
    objective than the zeroing point: columns that stop early return their
    best iterate, and a final check falls back to the zeroing point.
    """
    cfg = cfg or SolverConfig()
    period = cfg.restart_period()
    h = batch.hessian
    nb = len(batch)
    if nb == 0:
        return []
    if lipschitz is None:
        lipschitz = estimate_lipschitz(h, cfg.power_iters, safety=STEP_SAFETY)
    step2 = 2.0 / lipschitz
    lo, hi = batch.lower, batch.upper

    x0 = batch.zero_point()
    hx0 = hess_apply(h, x0)
    f0, r0, gap0 = kkt_terms(x0, hx0, lo, hi)

    out_x = x0.copy()
    out_r, out_gap = r0.copy(), gap0.copy()
    iters = np.zeros(nb, dtype=np.int64)
    degenerate = np.zeros(nb, dtype=bool)
    restarts = np.zeros(nb, dtype=np.int64)
    restart_obj: list[list[float]] = [[] for _ in range(nb)]

    settled = r0 == 0  # out_r/out_gap already describe out_x
    act = np.flatnonzero(~settled)

    # iteration state for the active columns, aligned with ``act``
    x_prev, hx_prev, f_prev = x0[act], hx0[act], f0[act]
    y, hy = x_prev.copy(), hx_prev.copy()
    t = np.ones(act.size)
    cycle = np.zeros(act.size, dtype=np.int64)
    best_x, best_f = x_prev.copy(), f_prev.copy()

    k = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while act.size and k < cfg.max_iters:
            k += 1
            a_lo, a_hi = lo[act], hi[act]
            x = np.clip(y - step2 * hy, a_lo, a_hi)
            hx = hess_apply(h, x)
            f, r, gap = kkt_terms(x, hx, a_lo, a_hi)

            finite = np.isfinite(f) & np.isfinite(r) & np.isfinite(gap)
            better = finite & (f < best_f)
            best_x[better] = x[better]
            best_f[better] = f[better]

            conv = finite & converged_mask(f, r, gap, cfg) & (f <= f0[act])
            stop = conv | ~finite
            cycle += 1
            if period is None:
                restart = (f > f_prev) | (cycle >= cfg.cycle_cap)
            else:
                restart = cycle >= period
            restart &= ~stop

            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            beta = ((t - 1.0) / t_next)[:, None]
            y = x + beta * (x - x_prev)
            hy = hx + beta * (hx - hx_prev)
            t = t_next
            for j in np.flatnonzero(restart):
                y[j], hy[j], t[j], cycle[j] = x[j], hx[j], 1.0, 0
                restarts[act[j]] += 1
                restart_obj[act[j]].append(float(best_f[j]))
            x_prev, hx_prev, f_prev = x, hx, f

            if stop.any():
                for j in np.flatnonzero(stop):
                    col = act[j]
                    iters[col] = k
                    if conv[j]:
                        out_x[col], out_r[col], out_gap[col] = x[j], r[j], gap[j]
                        settled[col] = True
                    else:
                        out_x[col] = best_x[j]
                        degenerate[col] = True
                keep = ~stop
                act = act[keep]
                x_prev, hx_prev, f_prev = x_prev[keep], hx_prev[keep], f_prev[keep]
                y, hy, t, cycle = y[keep], hy[keep], t[keep], cycle[keep]
                best_x, best_f = best_x[keep], best_f[keep]

    if act.size:
        iters[act] = k
        out_x[act] = best_x
    redo = np.flatnonzero(~settled)
    if redo.size:
        _, out_r[redo], out_gap[redo] = kkt_terms(out_x[redo], hess_apply(h, out_x[redo]), lo[redo], hi[redo])

    results = []
    for b in range(nb):
        delta = np.clip(out_x[b], lo[b], hi[b])
        r_b, gap_b = out_r[b], out_gap[b]
        if objective(h, delta) > objective(h, x0[b]):
            delta, r_b, gap_b = x0[b].copy(), r0[b], gap0[b]
        f_b = objective(h, delta)
        if degenerate[b]:
            status = Status.DEGENERATE
        elif converged_mask(np.array([f_b]), np.array([r_b]), np.array([gap_b]), cfg)[0]:
            status = Status.CONVERGED
        else:
            status = Status.MAX_ITERS
        results.append(
            SolveResult(delta, int(iters[b]), float(r_b), status, float(gap_b), int(restarts[b]), restart_obj[b])
        )
    return results


def solve_baseline_momentum(
    reduced: ReducedQp,
    lr_grid=BASELINE_LR_GRID,
    steps: int = 1000,
    method: str = "adam",
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> np.ndarray:
    """Best-of-grid first-order baseline on the reduced objective ``z^T Q z + c^T z``.

    For each learning rate, runs ``steps`` iterations from ``z = 0`` with the
    rate decaying linearly to zero, using Adam (``method="adam"``, no weight
    decay) or heavy-ball momentum (``method="momentum"``). Returns the final
    iterate with the lowest objective. No convergence guarantee: a poor grid
    leaves it short of the optimum. If every run ends non-finite, the zeroing
    point ``z = 0`` is returned.
    """
    if method not in ("adam", "momentum"):
        raise ConfigError(f"unknown baseline method {method!r}")
    if steps < 1:
        raise ConfigError("steps must be at least 1")
    q = np.asarray(reduced.q, dtype=np.float64)
    c = np.asarray(reduced.c, dtype=np.float64)
    n = c.shape[0]
    if n == 0 or not np.any(c):
        return np.zeros(n)

    def value(z):
        return float(z @ (q @ z) + c @ z)

    best_z, best_f = None, math.inf
    with np.errstate(over="ignore", invalid="ignore"):
        for lr in lr_grid:
            z = np.zeros(n)
            m = np.zeros(n)
            v = np.zeros(n)
            for i in range(steps):
                rate = lr * (1.0 - i / steps)
                g = 2.0 * (q @ z) + c
                if method == "adam":
                    m = beta1 * m + (1.0 - beta1) * g
                    v = beta2 * v + (1.0 - beta2) * g * g
                    m_hat = m / (1.0 - beta1 ** (i + 1))
                    v_hat = v / (1.0 - beta2 ** (i + 1))
                    z = z - rate * m_hat / (np.sqrt(v_hat) + eps)
                else:
                    m = beta1 * m + g
                    z = z - rate * m
                if not np.all(np.isfinite(z)):
                    break
            f = value(z) if np.all(np.isfinite(z)) else math.inf
            if np.isfinite(f) and f < best_f:
                best_z, best_f = z, f
    if best_z is None:
        return np.zeros(n)
    return best_z
