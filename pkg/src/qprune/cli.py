"""``qprune`` command line: prune, gen-synthetic, verify, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import mask as masklib
from .errors import QPruneError
from .hessian import DEFAULT_DAMPING
from .pipeline import RunConfig, prune_model, relative_error_ratio, resolve_threads
from .qp_build import build_batch
from .oracle import solve_batch_direct
from .solver import SolverConfig, solve_batch
from .synthetic import generate_model, random_instance
from .tensor import DenseMatrix, write_tensor

log = logging.getLogger("qprune")

VERIFY_DIMS = (8, 32, 128)


def _fraction(flag: str):
    def parse(text: str) -> float:
        try:
            v = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{flag} expects a number, got {text!r}") from None
        if not 0.0 <= v < 1.0:
            raise argparse.ArgumentTypeError(f"{flag} must be in [0, 1), got {text}")
        return v

    return parse


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {text}")
    return v


def _pattern(text: str) -> str:
    try:
        masklib.parse_pattern(text)
    except QPruneError as e:
        raise argparse.ArgumentTypeError(str(e)) from None
    return text


def _restart(text: str) -> str:
    try:
        SolverConfig(restart=text)
    except QPruneError as e:
        raise argparse.ArgumentTypeError(str(e)) from None
    return text


def _dims(text: str) -> list[int]:
    try:
        dims = [int(p) for p in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--dims expects N or N,N,..., got {text!r}") from None
    if min(dims) < 2:
        raise argparse.ArgumentTypeError("--dims entries must be at least 2")
    return dims


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qprune", description="Post-training pruning with column-wise QP weight reconstruction.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("prune", help="prune a model described by a manifest")
    pr.add_argument("--model", required=True, type=Path)
    pr.add_argument("--calib", required=True, type=Path)
    pr.add_argument("--out", required=True, type=Path)
    pr.add_argument("--sparsity", type=_fraction("--sparsity"), default=0.5)
    pr.add_argument("--pattern", type=_pattern, default="unstructured", help="unstructured or N:M")
    pr.add_argument("--selector", choices=("magnitude", "wanda", "file"), default="magnitude")
    pr.add_argument("--mask-file", type=Path, help="mask QPTN file, or directory of <layer>.qptn")
    pr.add_argument("--update", choices=("qp", "none", "baseline-momentum"), default="qp")
    pr.add_argument("--tol", type=_nonneg_float, default=0.01, help="absolute and relative solver tolerance")
    pr.add_argument("--max-iters", type=_positive_int, default=100_000)
    pr.add_argument("--restart", type=_restart, default="adaptive", help="adaptive or fixed:K")
    pr.add_argument("--batch-cols", type=_positive_int, default=512)
    pr.add_argument("--damping", type=_nonneg_float, default=DEFAULT_DAMPING)
    pr.add_argument("--skip-threshold", type=float, default=0.5, help="minimum converged fraction before a layer is skipped")
    pr.add_argument("--solver", choices=("iterative", "direct"), default="iterative")
    pr.add_argument("--seq-len", type=_positive_int, help="calibration rows per sequence for Hessian accumulation")
    pr.add_argument("--baseline-steps", type=_positive_int, default=1000)
    pr.add_argument("--dump-hessian", action="store_true", help="write each layer's damped Hessian as QPTN")
    pr.add_argument("--seed", type=int, default=0)

    gen = sub.add_parser("gen-synthetic", help="write a random model and correlated calibration data")
    gen.add_argument("--out", required=True, type=Path)
    gen.add_argument("--layers", type=_positive_int, default=4)
    gen.add_argument("--dims", type=_dims, default=[128], help="width for all layers, or comma list of layers+1 widths")
    gen.add_argument("--rho", type=_fraction("--rho"), default=0.6)
    gen.add_argument("--rows", type=_positive_int, default=4096)
    gen.add_argument("--activation", choices=("relu", "identity"), default="relu")
    gen.add_argument("--seed", type=int, default=0)

    ver = sub.add_parser("verify", help="compare the iterative solver with the direct oracle")
    ver.add_argument("--tol", type=_nonneg_float, default=1e-3, help="allowed |dw - dw_oracle|_inf / (1 + |dw_oracle|_inf)")
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--instances", type=_positive_int, default=10, help="instances per dimension")
    ver.add_argument("--dims", type=_dims, default=list(VERIFY_DIMS))
    ver.add_argument("--dump", type=Path, help="directory to write the worst instance to on failure")

    rep = sub.add_parser("report", help="print the summary table of a run report")
    rep.add_argument("path", type=Path, help="report.json or the run's output directory")
    return p


def _print_table(layers: list[dict], out=None) -> None:
    out = out or sys.stdout
    print(f"{'layer':<20} {'ratio':>10} {'initial':>12} {'final':>12}  status", file=out)
    for rep in layers:
        status = "skipped: " + rep["skip_reason"] if rep["skipped"] else f"ok ({rep['converged_fraction']:.0%} converged)"
        print(f"{rep['name']:<20} {rep['ratio']:>10.4f} {rep['initial_error']:>12.4e} {rep['final_error']:>12.4e}  {status}", file=out)


def cmd_prune(args, parser) -> int:
    if args.mask_file is not None and args.selector != "file":
        parser.error("--mask-file requires --selector file")
    if args.selector == "file" and args.mask_file is None:
        parser.error("--selector file requires --mask-file")
    if not 0.0 < args.skip_threshold <= 1.0:
        parser.error(f"--skip-threshold must be in (0, 1], got {args.skip_threshold}")
    if args.tol == 0:
        parser.error("--tol must be positive")
    cfg = RunConfig(
        model=args.model,
        calib=args.calib,
        out=args.out,
        sparsity=args.sparsity,
        pattern=args.pattern,
        selector=args.selector,
        mask_file=args.mask_file,
        update=args.update,
        solver=SolverConfig(rel_tol=args.tol, abs_tol=args.tol, max_iters=args.max_iters, restart=args.restart),
        solver_kind=args.solver,
        damping=args.damping,
        batch_cols=args.batch_cols,
        skip_threshold=args.skip_threshold,
        seq_len=args.seq_len,
        baseline_steps=args.baseline_steps,
        seed=args.seed,
        dump_hessian=args.dump_hessian,
        threads=resolve_threads(None),
    )
    _, reports = prune_model(cfg)
    _print_table([r.to_json() for r in reports])
    ratios = [relative_error_ratio(r) for r in reports]
    print(f"geomean ratio {float(np.exp(np.mean(np.log(np.maximum(ratios, 1e-300))))):.4f}; report: {args.out / 'report.json'}")
    return 0


def cmd_gen_synthetic(args, parser) -> int:
    dims = args.dims[0] if len(args.dims) == 1 else args.dims
    if len(args.dims) not in (1, args.layers + 1):
        parser.error(f"--dims needs 1 or {args.layers + 1} entries for {args.layers} layers")
    manifest, calib = generate_model(args.out, args.layers, dims, args.rho, args.rows, args.seed, args.activation)
    print(f"wrote {manifest} and {calib}")
    return 0


def verify_grid(seed: int, dims, per_dim: int, cfg: SolverConfig | None = None):
    """Yield ``(instance, deviation)`` for each seeded instance in the grid."""
    for d in dims:
        for i in range(per_dim):
            inst = random_instance(d, seed * 1_000_003 + d * 1000 + i)
            batch = build_batch(inst.hessian, inst.w, inst.mask)
            got = np.array([r.delta for r in solve_batch(batch, cfg)])
            ref = solve_batch_direct(batch)
            dev = np.max(np.abs(got - ref), axis=1) / (1.0 + np.max(np.abs(ref), axis=1))
            yield inst, float(dev.max())


def cmd_verify(args, parser) -> int:
    worst, worst_dev = None, -1.0
    count = 0
    for inst, dev in verify_grid(args.seed, args.dims, args.instances):
        count += 1
        if dev > worst_dev:
            worst, worst_dev = inst, dev
    ok = worst_dev <= args.tol
    print(f"{count} instances, max deviation {worst_dev:.6e} (tolerance {args.tol:g}): {'PASS' if ok else 'FAIL'}")
    if not ok:
        info = {"seed": worst.seed, "dim": worst.w.shape[0], "condition_number": worst.condition_number, "deviation": worst_dev}
        print("worst instance: " + json.dumps(info), file=sys.stderr)
        if args.dump is not None:
            args.dump.mkdir(parents=True, exist_ok=True)
            write_tensor(args.dump / "hessian.qptn", DenseMatrix.from_array(worst.hessian))
            write_tensor(args.dump / "weights.qptn", DenseMatrix.from_array(worst.w))
            masklib.save_mask(args.dump / "mask.qptn", worst.mask)
            (args.dump / "instance.json").write_text(json.dumps(info, indent=2) + "\n")
    return 0 if ok else 1


def cmd_report(args, parser) -> int:
    path = args.path / "report.json" if args.path.is_dir() else args.path
    doc = json.loads(path.read_text())
    _print_table(doc["layers"])
    print(json.dumps(doc["totals"]))
    return 0


COMMANDS = {"prune": cmd_prune, "gen-synthetic": cmd_gen_synthetic, "verify": cmd_verify, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, parser)
    except (QPruneError, OSError) as e:
        print(f"qprune: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
