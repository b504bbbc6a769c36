import os

os.environ.setdefault("JOBLIB_MULTIPROCESSING", "0")

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional

from geometry import Annulus, Ball
from nonlinearity import check_declared, finite_sweep
from path_engine import mean_exit_time
from reference_oracles import fd_solve, radial_solve
from run_config import LoadedRun, load_run
from solver_core import NonConvergenceError, SolutionField, picard_solve
from utils import (
    configure_logging,
    load_runtime_flags,
    read_solution_csv,
    write_field_csv,
    write_paths_meta,
    write_report,
)
from verification import run_verifications, summary_frame, verdict_lines

logger = logging.getLogger("mcsolve")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERICAL = 3
EXIT_VERIFICATION = 4


def _out_dir(args: argparse.Namespace, run: LoadedRun) -> Path:
    out = Path(args.out) if args.out else Path(run.config.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_verdicts(verdicts) -> None:
    if not verdicts:
        print("verification: no checks enabled")
        return
    print(summary_frame(verdicts).to_string(index=False))


def _check_conditions(run: LoadedRun) -> bool:
    """Print condition-checker verdicts; True when every declared condition held on the sample."""
    checks = run.config.checks
    finite_sweep(run.problem.nonlinearity, run.domain, box_radius=checks.box_radius, seed=run.config.seed)
    reports = check_declared(
        run.problem.nonlinearity, run.domain, checks.n_samples, checks.box_radius, run.config.seed
    )
    if not reports:
        print("conditions: none declared")
    for report in reports:
        print(report.to_line())
    return all(r.holds_on_sample for r in reports)


def cmd_solve(args: argparse.Namespace, run: LoadedRun) -> int:
    holds = _check_conditions(run)
    if args.check_only:
        return EXIT_VERIFICATION if args.strict and not holds else EXIT_OK

    out = _out_dir(args, run)
    try:
        solution, report = picard_solve(run.problem, run.path_config, run.solver_config)
    except NonConvergenceError as exc:
        write_report(out / "report.txt", exc.report.to_lines())
        raise
    verdicts = run_verifications(run, solution, solved=True)

    write_field_csv(out / "solution.csv", solution.interior_nodes, solution.interior_values, solution.interior_standard_errors)
    write_report(out / "report.txt", report.to_lines() + verdict_lines(verdicts))
    write_paths_meta(
        out / "paths_meta.txt",
        run.config.seed,
        run.path_config.step,
        report.truncated_path_fraction,
        exit_tolerance_factor=f"{run.path_config.exit_tolerance_factor:g}",
        max_steps=run.path_config.max_steps,
    )
    _print_verdicts(verdicts)
    print(f"\nSaved artifacts to: {out}")
    if args.strict and any(v.failed for v in verdicts):
        return EXIT_VERIFICATION
    return EXIT_OK


def cmd_verify(args: argparse.Namespace, run: LoadedRun) -> int:
    out = _out_dir(args, run)
    solution_path = Path(args.solution) if args.solution else out / "solution.csv"
    nodes, values, errors = read_solution_csv(solution_path)
    u = SolutionField.from_nodes(run.domain, run.solver_config.grid_resolution, nodes, values, errors)
    verdicts = run_verifications(run, u)
    write_report(out / "verification.txt", verdict_lines(verdicts))
    _print_verdicts(verdicts)
    if args.strict and any(v.failed for v in verdicts):
        return EXIT_VERIFICATION
    return EXIT_OK


def cmd_check(args: argparse.Namespace, run: LoadedRun) -> int:
    holds = _check_conditions(run)
    return EXIT_VERIFICATION if args.strict and not holds else EXIT_OK


def _oracle_field(run: LoadedRun) -> tuple[str, SolutionField]:
    resolution = run.solver_config.grid_resolution
    if isinstance(run.domain.shape, (Ball, Annulus)):
        profile = radial_solve(run.problem)
        return "radial", SolutionField.from_function(run.domain, resolution, profile.field, run.problem.n_components)
    return "finite_difference", fd_solve(run.problem.prepared(run.path_config), resolution)


def cmd_oracle(args: argparse.Namespace, run: LoadedRun) -> int:
    out = _out_dir(args, run)
    method, oracle = _oracle_field(run)
    write_field_csv(out / "oracle.csv", oracle.interior_nodes, oracle.interior_values, oracle.interior_standard_errors)

    start = run.start
    exit_time = mean_exit_time(
        run.domain, start, run.path_config, run.config.verification.n_paths, n_jobs=run.solver_config.n_jobs
    )
    lines = [
        f"method: {method}",
        "start: " + " ".join(f"{c:.6g}" for c in start),
        f"mean_exit_time: {exit_time.mean:.6g}",
        f"mean_exit_time_se: {exit_time.standard_error:.6g}",
        f"exit_time_bound: {run.domain.exit_time_bound(start):.6g}",
        f"truncated_path_fraction: {exit_time.truncated_fraction:.6g}",
    ]
    write_report(out / "oracle_report.txt", lines)
    print("\n".join(lines))
    print(f"\nSaved artifacts to: {out}")
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "verify": cmd_verify, "check": cmd_check, "oracle": cmd_oracle}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Monte Carlo solver and verification harness for semilinear elliptic systems with measure data."
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", help="TOML run configuration")
    common.add_argument("--strict", action="store_true", help="Exit with code 4 when a verification or condition check fails")
    common.add_argument("--threads", type=int, default=None, help="Worker threads for node batches (default from config.json)")
    common.add_argument("--seed", type=int, default=None, help="Override the seed of the run file")
    common.add_argument("--out", default=None, help="Output directory (default: the run file's out entry)")

    sub = parser.add_subparsers(dest="command", required=True)
    solve = sub.add_parser("solve", parents=[common], help="Solve, verify and write solution.csv / report.txt")
    solve.add_argument("--check-only", action="store_true", help="Validate and print condition verdicts without solving")
    verify = sub.add_parser("verify", parents=[common], help="Verify a stored solution.csv without re-solving")
    verify.add_argument("--solution", default=None, help="Solution file (default: <out>/solution.csv)")
    sub.add_parser("check", parents=[common], help="Run the condition checker only")
    sub.add_parser("oracle", parents=[common], help="Run the deterministic reference solver")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    """Parse ``argv`` and run one subcommand.

    Returns:
        0 on success, 2 on invalid input, 3 on a numerical failure, 4 on a failed check under --strict.
    """
    args = build_parser().parse_args(argv)
    flags = load_runtime_flags()
    configure_logging(flags.log_level)
    threads = args.threads if args.threads is not None else flags.threads
    try:
        run = load_run(args.config, seed=args.seed, threads=max(1, threads), progress=flags.progress)
        return COMMANDS[args.command](args, run)
    except (ValueError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return EXIT_INVALID
    except RuntimeError as exc:
        logger.error("%s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
