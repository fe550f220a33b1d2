"""Command-line entry point: ``epimerge {synth,build-basis,merge,diagnose,sweep}``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
failure (jitter escalation exhausted). ``EPIMERGE_LOG`` selects the log
level (``error``, ``info`` or ``debug``).
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .checkpoint import (
    AlignmentError,
    CheckpointFormatError,
    format_value,
    matrix_layers,
    read_checkpoint,
    task_vector,
    write_checkpoint,
    write_sidecar,
)
from .curvature import DEFAULT_JITTER, accumulate_fisher, fisher_from_file, is_gradient_file, save_fisher, save_gradients
from .diagnostics import diagnose
from .estimator import SubspaceMerger
from .linalg import SolveError
from .merge import Method
from .subspace import RankGuardError, TaggedBasis, build_tagged_basis, check_rank_guard, load_basis, save_basis
from .synthetic import (
    evaluate_accuracy,
    finetune_mlp,
    full_batch_grad_norm,
    gen_mlp_tasks,
    gradient_stream,
    linear_path_losses,
    load_task,
    save_task,
)

logger = logging.getLogger("epimerge")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULT_ALPHAS = (0.20, 0.30, 0.40, 0.50, 0.70, 1.00)
DEFAULT_RANKS = (2, 4, 8, 16, 32)
DEFAULT_FRACTIONS = (0.005, 0.01, 0.05, 0.1, 0.25, 0.5, 1.0)
SWEEP_COLUMNS = ("method", "k", "alpha", "fraction", "avg_acc", "worst_acc", "eta", "V_S", "R_S")
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _method_list(text: str) -> list[str]:
    names = [x.strip() for x in text.split(",") if x.strip()]
    for n in names:
        if n not in {m.value for m in Method}:
            raise argparse.ArgumentTypeError(f"unknown method {n!r}")
    return names


# ---------------------------------------------------------------------------
# Shared argument groups


def _add_inputs(p, fishers=True):
    p.add_argument("--base", required=True, help="base checkpoint")
    p.add_argument("--models", action="append", required=True, help="fine-tuned checkpoint (repeat per task)")
    if fishers:
        p.add_argument("--fishers", action="append", default=None,
                       help="Fisher or gradient-batch file per task (repeat, same order as --models)")


def _add_merge_options(p):
    p.add_argument("--method", default=Method.EPIMER_SUM.value, choices=[m.value for m in Method])
    p.add_argument("--rank", type=int, default=2, help="per-task rank k")
    p.add_argument("--alpha", type=float, default=None, help="global scale (default 1/sqrt(T))")
    p.add_argument("--weights", type=_float_list, default=None, help="comma-separated task weights summing to 1")
    p.add_argument("--jitter", type=float, default=DEFAULT_JITTER)
    p.add_argument("--keep-fraction", type=float, default=0.20, help="TIES trim level")
    p.add_argument("--basis", default=None, help="prebuilt basis file")
    p.add_argument("--fraction", type=float, default=1.0, help="subsample fraction for gradient-batch fishers")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rank-violation", choices=("raise", "fallback"), default="raise",
                   help="what to do with matrix layers too small for rank*T atoms")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="epimerge", description="Merge fine-tuned checkpoints and inspect the merge.",
                     epilog="exit codes: 0 ok, 1 usage, 2 data or format, 3 numerical failure. EPIMERGE_LOG=error|info|debug")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate MLP tasks, fine-tuned models, gradient streams and datasets")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tasks", type=int, default=4)
    p.add_argument("--features", type=int, default=16)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--batch-size", type=int, default=500)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("build-basis", help="build the tagged subspace basis")
    _add_inputs(p, fishers=False)
    p.add_argument("--rank", type=int, default=2)
    p.add_argument("--rank-violation", choices=("raise", "fallback"), default="raise")
    p.add_argument("--out", required=True)

    p = sub.add_parser("merge", help="merge fine-tuned checkpoints")
    _add_inputs(p)
    _add_merge_options(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("diagnose", help="curvature heterogeneity, variance, residual energy and bound")
    _add_inputs(p)
    _add_merge_options(p)
    p.add_argument("--data", action="append", default=None,
                   help="dataset per task; adds a linear-path loss scan from each model to the merge")
    p.add_argument("--path-points", type=int, default=11)
    p.add_argument("--raw-eta", action="store_true", help="report eta without trace normalization")
    p.add_argument("--out", default=None, help="also write the JSON report here")

    p = sub.add_parser("sweep", help="grid over method, k, alpha and Fisher fraction")
    _add_inputs(p)
    p.add_argument("--data", action="append", required=True, help="dataset per task")
    p.add_argument("--methods", type=_method_list, default=[m.value for m in Method])
    p.add_argument("--alphas", type=_float_list, default=list(DEFAULT_ALPHAS))
    p.add_argument("--ranks", type=_int_list, default=list(DEFAULT_RANKS))
    p.add_argument("--fractions", type=_float_list, default=list(DEFAULT_FRACTIONS))
    p.add_argument("--weights", type=_float_list, default=None)
    p.add_argument("--jitter", type=float, default=DEFAULT_JITTER)
    p.add_argument("--keep-fraction", type=float, default=0.20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True, help="CSV output path")
    return parser


# ---------------------------------------------------------------------------
# Loading


def _check_paths(args) -> None:
    paths = []
    for attr in ("base", "basis"):
        if getattr(args, attr, None):
            paths.append(getattr(args, attr))
    for attr in ("models", "fishers", "data"):
        paths.extend(getattr(args, attr, None) or [])
    missing = [p for p in paths if not os.path.isfile(p)]
    if missing:
        raise FileNotFoundError(f"missing input files: {', '.join(missing)}")


def _load_models(args):
    base = read_checkpoint(args.base)
    models = [read_checkpoint(p) for p in args.models]
    return base, models


def _load_fishers(args, method: Method, fraction: float = 1.0):
    if not args.fishers:
        if method.uses_curvature:
            raise UsageError(f"method {method.value} needs --fishers")
        return None
    if len(args.fishers) != len(args.models):
        raise UsageError(f"got {len(args.fishers)} --fishers for {len(args.models)} --models")
    return [fisher_from_file(p, fraction, args.seed + i) for i, p in enumerate(args.fishers)]


def _load_or_build_basis(args, base, models, T) -> TaggedBasis:
    if args.basis:
        basis = load_basis(args.basis)
        if basis.n_tasks != T:
            raise ValueError(f"basis {args.basis} was built for {basis.n_tasks} tasks, got {T} models")
        return basis
    return build_tagged_basis([task_vector(m, base) for m in models], args.rank, on_violation=args.rank_violation)


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args) -> int:
    if min(args.tasks, args.features, args.hidden, args.classes, args.samples) <= 0:
        raise UsageError("sizes must be positive")
    os.makedirs(args.out, exist_ok=True)
    theta0, tasks = gen_mlp_tasks(args.seed, args.tasks, args.features, args.hidden, args.classes, args.samples)
    write_checkpoint(theta0, os.path.join(args.out, "base.epmc"))
    write_sidecar(os.path.join(args.out, "base.epmc"), {"kind": "model", "seed": args.seed})

    def run(t):
        return finetune_mlp(theta0, tasks[t], args.steps, args.lr, args.seed * 1000 + t, args.batch_size)

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        fine = list(pool.map(run, range(args.tasks)))
    for t, (task, theta) in enumerate(zip(tasks, fine)):
        model_path = os.path.join(args.out, f"model_{t}.epmc")
        write_checkpoint(theta, model_path)
        ratio = full_batch_grad_norm(theta, task) / max(full_batch_grad_norm(theta0, task), 1e-300)
        write_sidecar(model_path, {"kind": "model", "task": t, "grad_norm_ratio": ratio,
                                   "test_accuracy": evaluate_accuracy(theta, task)})
        stream = gradient_stream(theta, task)
        save_gradients(stream, os.path.join(args.out, f"grads_{t}.epmc"))
        save_fisher(accumulate_fisher(stream), os.path.join(args.out, f"fisher_{t}.epmc"))
        save_task(task, os.path.join(args.out, f"data_{t}.epmc"))
        logger.info("task %d: test accuracy %.4f, grad-norm ratio %.3g", t, evaluate_accuracy(theta, task), ratio)
    print(f"wrote {args.tasks} tasks to {args.out}")
    return EXIT_OK


def cmd_build_basis(args) -> int:
    base, models = _load_models(args)
    deltas = [task_vector(m, base) for m in models]
    T = len(deltas)
    violations = check_rank_guard(deltas[0], args.rank, T)
    bad = {n for n, _, _ in violations}
    if violations and args.rank_violation == "raise":
        raise RankGuardError(violations)
    basis = build_tagged_basis(deltas, args.rank, on_violation=args.rank_violation)
    save_basis(basis, args.out)
    for name in list(basis.layers) + basis.fallback:
        status = "fallback (task arithmetic)" if name in bad else "ok"
        print(f"{name}: kT={args.rank * T} {status}")
    return EXIT_OK


def _merger(args, method: Method, alpha=None, rank=None) -> SubspaceMerger:
    return SubspaceMerger(
        method=method.value,
        rank=args.rank if rank is None else rank,
        alpha=args.alpha if alpha is None else alpha,
        weights=args.weights,
        jitter=args.jitter,
        keep_fraction=args.keep_fraction,
        rank_violation=getattr(args, "rank_violation", "fallback"),
    )


def cmd_merge(args) -> int:
    method = Method(args.method)
    base, models = _load_models(args)
    fishers = _load_fishers(args, method, args.fraction)
    basis = _load_or_build_basis(args, base, models, len(models)) if method.uses_basis else None
    merger = _merger(args, method).fit(base, models, fishers, basis)
    write_checkpoint(merger.merged_, args.out)
    meta = {
        "kind": "merged",
        "method": method.value,
        "weights": [float(w) for w in merger.weights_],
        "k": basis.k if basis is not None else args.rank,
        "alpha": float(merger.alpha_),
        "jitter": float(args.jitter),
    }
    if basis is not None:
        meta["fallback"] = basis.fallback
    for name, eps in (merger.eps_used_ or {}).items():
        meta[f"eps_used.{name}"] = float(eps)
    write_sidecar(args.out, meta)
    print(f"merged {len(models)} models with {method.value} into {args.out}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    method = Method(args.method)
    base, models = _load_models(args)
    if not args.fishers:
        raise UsageError("diagnose needs --fishers")
    fishers = _load_fishers(args, Method.EPIMER_MEAN, args.fraction)
    basis = _load_or_build_basis(args, base, models, len(models))
    report = diagnose(base, models, basis, fishers, args.weights, args.jitter, method, args.alpha,
                      trace_normalized=not args.raw_eta)
    if args.data:
        if len(args.data) != len(models):
            raise UsageError(f"got {len(args.data)} --data for {len(models)} --models")
        merged = _merger(args, method).fit(base, models, fishers, basis).merged_
        report.linear_path = {
            f"task_{t}": linear_path_losses(m, merged, load_task(p), args.path_points)
            for t, (m, p) in enumerate(zip(models, args.data))
        }
    text = report.to_json()
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    return EXIT_OK


def _axes(method: Method):
    """Which sweep axes a method actually depends on: (k, alpha, fraction)."""
    return (
        method.uses_basis,
        method in (Method.TA, Method.TSVM, Method.EPIMER_SUM),
        method.uses_curvature,
    )


def cmd_sweep(args) -> int:
    if not (args.methods and args.alphas and args.ranks and args.fractions):
        raise UsageError("sweep grids must be non-empty")
    base, models = _load_models(args)
    T = len(models)
    if len(args.data) != T:
        raise UsageError(f"got {len(args.data)} --data for {T} --models")
    if not args.fishers:
        raise UsageError("sweep needs --fishers (Fisher or gradient-batch files)")
    tasks = [load_task(p) for p in args.data]
    deltas = [task_vector(m, base) for m in models]

    # k values are clipped by the rank guard: keep those where at least one
    # matrix layer can hold k*T atoms, the rest of the layers fall back to TA
    n_matrix = len(matrix_layers(deltas[0]))
    ranks = []
    for k in args.ranks:
        if len(check_rank_guard(deltas[0], k, T)) == n_matrix:
            logger.warning("dropping k=%d: no matrix layer satisfies the rank guard", k)
        else:
            ranks.append(k)
    if not ranks:
        raise RankGuardError(check_rank_guard(deltas[0], min(args.ranks), T))

    fractions = list(args.fractions)
    if not all(is_gradient_file(p) for p in args.fishers):
        dropped = [f for f in fractions if f != 1.0]
        if dropped:
            logger.warning("precomputed Fisher files cannot be subsampled; dropping fractions %s", dropped)
        fractions = [1.0]

    bases = {k: build_tagged_basis(deltas, k, on_violation="fallback") for k in ranks}
    fishers = {f: _load_fishers(args, Method.EPIMER_MEAN, f) for f in fractions}

    points = []
    for name in args.methods:
        method = Method(name)
        uses_k, uses_alpha, uses_f = _axes(method)
        for k in ranks if uses_k else [None]:
            for a in args.alphas if uses_alpha else [None]:
                for f in fractions if uses_f else [None]:
                    points.append((method, k, a, f))

    eval_k = ranks[0]

    def run(point):
        method, k, a, f = point
        basis = bases[k if k is not None else eval_k]
        fis = fishers[f if f is not None else 1.0]
        alpha = a if a is not None else (1.0 if method == Method.TA else None)
        merger = SubspaceMerger(method=method.value, rank=basis.k, alpha=alpha, weights=args.weights,
                                jitter=args.jitter, keep_fraction=args.keep_fraction, rank_violation="fallback")
        merged = merger.fit(base, models, fis if method.uses_curvature else None, basis if method.uses_basis else None).merged_
        accs = [evaluate_accuracy(merged, t) for t in tasks]
        rep = diagnose(base, models, basis, fis, args.weights, args.jitter, method, merger.alpha_)
        return [method.value, k if k is not None else "", a if a is not None else "", f if f is not None else "",
                float(np.mean(accs)), float(min(accs)), rep.eta, rep.V_S, rep.R_S]

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        rows = list(pool.map(run, points))

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for row in rows:
        writer.writerow([format_value(v) if isinstance(v, float) else v for v in row])
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "build-basis": cmd_build_basis,
    "merge": cmd_merge,
    "diagnose": cmd_diagnose,
    "sweep": cmd_sweep,
}


def _configure_logging() -> None:
    level = os.environ.get("EPIMERGE_LOG", "error").strip().lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"EPIMERGE_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        _configure_logging()
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            return exc.code if isinstance(exc.code, int) else EXIT_USAGE
        _check_paths(args)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"epimerge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SolveError as exc:
        print(f"epimerge: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RankGuardError as exc:
        print(f"epimerge: rank guard: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CheckpointFormatError, AlignmentError, FileNotFoundError, ValueError, KeyError, OSError) as exc:
        print(f"epimerge: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
