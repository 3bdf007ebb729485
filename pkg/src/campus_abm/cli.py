"""Command-line entry point: ``campus-abm <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 runtime or convergence error.
"""
from __future__ import annotations

import argparse
import datetime as dt
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import files
from .calibrate import BoundaryWarning, CalibrationError, calibrate_beta, write_report
from .core import ConfigError, ModelError
from .engine import run_ensemble
from .files import RunConfig, parse_config_text
from .popsynth import visit_matrix_for, write_matrix
from .sensitivity import oat_sweep, run_lhs, run_sobol

log = logging.getLogger("campus_abm")

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _load(args) -> RunConfig:
    run = files.parse_config(args.config) if args.config else parse_config_text("")
    if args.seed is not None:
        run = files.with_seed(run, args.seed)
    return run


def _finish(args, run, outputs, started, extra=None):
    rerun = f"campus-abm {args.command} --config config.txt --out ."
    if args.replicates is not None:
        rerun += f" --replicates {args.replicates}"
    if getattr(args, "context", None):
        rerun += f" --context {args.context}"
    files.write_manifest(args.out, args.command, args.argv, run, run.model.seed, outputs,
                         started, {"rerun": rerun, **(extra or {})})


def cmd_simulate(args, run: RunConfig):
    reps = args.replicates or 200
    summary = run_ensemble(run.model, reps, threads=args.threads)
    out = Path(args.out)
    outputs = [files.write_timeseries(summary, out / "timeseries.csv"),
               files.write_summary(summary, out / "summary.csv")]
    lo, hi = summary.qs_ci
    print(f"qs_mean = {summary.qs_mean:.4f}  95% CI ({lo:.4f}, {hi:.4f})  replicates = {reps}")
    return outputs, {"replicates": reps, "qs_mean": f"{summary.qs_mean:.6f}"}


def cmd_calibrate(args, run: RunConfig):
    spec = replace(run.calibration, threads=args.threads)
    if args.replicates:
        spec = replace(spec, replicates_per_eval=args.replicates)
    path = Path(args.out) / "calibration.txt"
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", BoundaryWarning)
            result = calibrate_beta(run.model, spec)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
    except CalibrationError as e:
        if e.best is not None:
            write_report(e.best, path)
        raise
    write_report(result, path)
    print(f"beta_tilde = {result.beta_tilde:.6g}  prevalence = {result.prevalence:.4f}")
    for name, b in zip(result.context_names, result.betas):
        print(f"  beta_{name} = {b:.6g}")
    return [path], {"replicates": spec.replicates_per_eval}


def cmd_sa_local(args, run: RunConfig):
    space = run.space
    names = space.names if args.context == "all" else (args.context,)
    reps = args.replicates or run.sa.oat_replicates
    matrix = visit_matrix_for(run.model)
    outputs = []
    for name in names:
        if name not in space.names:
            raise ConfigError(f"--context {name!r} is not one of {', '.join(space.names)}")
        sweep = oat_sweep(space, space.names.index(name), run.sa.oat_grid_points, run.model,
                          reps, seed=run.model.seed, threads=args.threads, matrix=matrix)
        outputs.append(files.write_sweep(sweep, Path(args.out) / f"sweep_{name}.csv"))
        print(f"{name}: qoi {sweep.mean.min():.4f} .. {sweep.mean.max():.4f}")
    return outputs, {"replicates": reps}


def _print_indices(result):
    for ix in result.indices:
        print(f"{ix.method:>4} {ix.parameter:<8} {ix.estimate:+.3f}  [{ix.ci_lo:+.3f}, {ix.ci_hi:+.3f}]")


def cmd_sa_lhs(args, run: RunConfig):
    reps = args.replicates or run.sa.replicates
    result = run_lhs(run.model, run.space, run.sa.lhs_samples, reps, run.model.seed,
                     run.sa.regression_bootstrap, run.sa.repeats, args.threads)
    out = Path(args.out)
    _print_indices(result)
    return [files.write_design(result, out / "lhs_design.csv"),
            files.write_indices(result, out / "lhs_indices.csv")], {"replicates": reps}


def cmd_sa_sobol(args, run: RunConfig):
    reps = args.replicates or run.sa.replicates
    result = run_sobol(run.model, run.space, run.sa.sobol_samples, reps, run.model.seed,
                       run.sa.sobol_bootstrap, args.threads)
    out = Path(args.out)
    _print_indices(result)
    s_sum = sum(ix.estimate for ix in result.indices if ix.method == "S")
    print(f"sum of first-order indices = {s_sum:.3f}")
    return [files.write_design(result, out / "sobol_design.csv"),
            files.write_indices(result, out / "sobol_indices.csv")], {"replicates": reps}


def cmd_synth_pop(args, run: RunConfig):
    if run.model.visit_matrix is not None:
        matrix = np.asarray(run.model.visit_matrix)
    else:
        matrix = visit_matrix_for(run.model)
    path = write_matrix(matrix, Path(args.out) / "visit_matrix.txt")
    print(f"wrote {matrix.shape[0]} x {matrix.shape[1]} visit matrix; column means "
          + " ".join(f"{v:.4f}" for v in matrix.mean(axis=0)))
    return [path], {}


COMMANDS = {
    "simulate": (cmd_simulate, "run an ensemble and write per-tick counts"),
    "calibrate": (cmd_calibrate, "fit the shared transmission probability to a target prevalence"),
    "sa-local": (cmd_sa_local, "one-at-a-time sweep of a context transmission probability"),
    "sa-lhs": (cmd_sa_lhs, "Latin hypercube design with PCC/SRC indices"),
    "sa-sobol": (cmd_sa_sobol, "Sobol first- and total-order indices"),
    "synth-pop": (cmd_synth_pop, "write the synthesized visit-probability matrix"),
}


def build_parser() -> argparse.ArgumentParser:
    def add_globals(p, suppress):
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        p.add_argument("--config", default=d(None), help="key = value config file")
        p.add_argument("--seed", type=int, default=d(None), help="override the config seed")
        p.add_argument("--replicates", type=int, default=d(None))
        p.add_argument("--out", default=d("."), help="output directory")
        p.add_argument("--threads", type=int, default=d(1),
                       help="worker processes; results do not depend on it")
        p.add_argument("-v", "--verbose", action="store_true", default=d(False))

    parser = argparse.ArgumentParser(
        prog="campus-abm",
        description="Campus drinking-behaviour ABM: simulation, calibration, sensitivity analysis.")
    add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        add_globals(p, suppress=True)
        if name == "sa-local":
            p.add_argument("--context", default="MU", help="context name, or 'all'")
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    args.argv = ["campus-abm", *argv]
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = dt.datetime.now(dt.timezone.utc)
    try:
        if args.replicates is not None and args.replicates < 1:
            raise ConfigError("--replicates must be >= 1")
        run = _load(args)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        outputs, extra = COMMANDS[args.command][0](args, run)
        _finish(args, run, outputs, started, extra)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ModelError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
