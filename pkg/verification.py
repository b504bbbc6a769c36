"""Run the enabled verifications of a run file against a solved field."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd

from geometry import Ball, Domain, Intersection
from measure_data import revuz_check
from reference_oracles import default_bumps, duality_residual, dynkin_consistency
from run_config import LoadedRun
from solver_core import (
    SolutionField,
    estimate_barrier,
    martingale_residual,
    stampacchia_check,
    uniqueness_probe,
)

logger = logging.getLogger(__name__)

__all__ = ["Verdict", "run_verifications", "summary_frame", "verdict_lines"]

PASS = "pass"
FAIL = "fail"
SKIPPED = "skipped"

# Stampacchia bound name -> condition it rests on
BOUND_CONDITIONS = {"a4doubleprime": "A4doubleprime", "a5": "A5"}


@dataclass(frozen=True)
class Verdict:
    name: str
    status: str
    statistic: float = float("nan")
    threshold: float = float("nan")
    detail: str = ""

    @property
    def failed(self) -> bool:
        return self.status == FAIL

    def to_lines(self) -> list[str]:
        lines = [f"{self.name}: {self.status}"]
        if self.status != SKIPPED:
            lines.append(f"{self.name}_statistic: {self.statistic:.6g}")
            lines.append(f"{self.name}_threshold: {self.threshold:.6g}")
        if self.detail:
            lines.append(f"{self.name}_detail: {self.detail}")
        return lines


def _status(ok: bool) -> str:
    return PASS if ok else FAIL


def _revuz(run: LoadedRun) -> Verdict:
    problem = run.problem.prepared(run.path_config)
    spec = run.config.verification
    worst = 0.0
    all_ok = True
    checked = 0
    for k, mu in enumerate(problem.measures):
        if mu.is_zero:
            continue
        cfg = run.path_config.with_seed(run.path_config.base_seed + 7919 * (k + 1))
        result = revuz_check(
            mu,
            problem.domain,
            lambda p: np.ones(len(p)),
            lambda p: np.ones(len(p)),
            spec.revuz_time,
            spec.n_paths,
            cfg,
        )
        checked += 1
        ratio = abs(result.lhs - result.rhs) / max(result.standard_error, 1e-300)
        worst = max(worst, ratio if abs(result.lhs - result.rhs) > 1e-12 else 0.0)
        all_ok &= result.passed and not result.variance_exploded
    if not checked:
        return Verdict("revuz", SKIPPED, detail="all measures are zero")
    return Verdict("revuz", _status(all_ok), worst, 3.0, "|lhs - rhs| / pooled SE")


def _martingale(run: LoadedRun, u: SolutionField) -> Verdict:
    spec = run.config.verification
    stats = martingale_residual(
        u, run.problem, run.start, spec.n_paths, spec.checkpoint_times, run.path_config, first_index=1 << 40
    )
    worst = max(s.worst_ratio for s in stats)
    return Verdict("martingale", _status(all(s.passed for s in stats)), worst, 3.0, "max |mean D(t)| / SE")


def _stampacchia(run: LoadedRun, u: SolutionField) -> Verdict:
    f = run.problem.nonlinearity
    results = stampacchia_check(u, run.problem)
    bounded = {
        name: r
        for name, r in results.items()
        if r.rhs is not None and f.declares(BOUND_CONDITIONS[name], explicit=True)
    }
    if not bounded:
        return Verdict(
            "stampacchia", SKIPPED, detail=f"no bound declared; int |f(u)| = {results['l1'].lhs:.6g}"
        )
    ratios = {name: r.lhs / max(r.rhs, 1e-300) for name, r in bounded.items()}
    worst = max(ratios.values())
    return Verdict(
        "stampacchia",
        _status(all(r.ok for r in bounded.values())),
        worst,
        1.05,
        "int |f(u)| / bound (" + ", ".join(sorted(bounded)) + ")",
    )


def _duality(run: LoadedRun, u: SolutionField) -> Verdict:
    tests = default_bumps(run.domain, run.config.verification.n_test_functions, seed=run.config.seed)
    if not tests:
        return Verdict("duality", SKIPPED, detail="no test function fits inside the domain")
    residuals = duality_residual(u, run.problem.prepared(run.path_config), tests)
    worst = max(abs(r.residual) / max(r.budget, 1e-300) for r in residuals)
    return Verdict("duality", _status(all(r.passed for r in residuals)), worst, 1.0, "max |residual| / budget")


def _dynkin_region(domain: Domain, start: np.ndarray) -> tuple[Domain, np.ndarray]:
    radius = 0.5 * float(domain.signed_distance(start))
    g_domain = Domain(Intersection((domain.shape, Ball(tuple(start), radius))))
    return g_domain, start


def _dynkin(run: LoadedRun, u: SolutionField) -> Verdict:
    spec = run.config.verification
    g_domain, center = _dynkin_region(run.domain, run.start)
    rng = np.random.default_rng([run.config.seed, 0xD1])
    starts = [center]
    if spec.dynkin_starts > 1:
        starts.extend(g_domain.sample_interior(spec.dynkin_starts - 1, rng))
    results = dynkin_consistency(
        u, run.problem, g_domain, np.array(starts), spec.n_paths, run.path_config, first_index=1 << 41
    )
    ratios = [
        float(np.max(np.where(np.abs(r.discrepancy) <= 1e-12, 0.0, np.abs(r.discrepancy) / r.standard_error)))
        for r in results
    ]
    return Verdict("dynkin", _status(all(r.passed for r in results)), max(ratios), 3.0, "max |discrepancy| / SE")


def _uniqueness(run: LoadedRun, u: Optional[SolutionField]) -> Verdict:
    if u is None:
        return Verdict("uniqueness_probe", SKIPPED, detail="needs a solve; run it through the solve subcommand")
    if not run.problem.nonlinearity.declares("A4prime"):
        return Verdict("uniqueness_probe", SKIPPED, detail="nonlinearity does not declare A4prime")
    barrier = estimate_barrier(run.problem, run.path_config, run.solver_config)
    n = run.problem.n_components
    v = barrier.interior_values[:, 0]
    base = SolutionField.zeros(run.domain, run.solver_config.grid_resolution, n)
    guesses = [
        base,
        base.with_interior_values(np.repeat(v[:, None], n, axis=1)),
        base.with_interior_values(np.repeat(-v[:, None], n, axis=1)),
    ]
    report = uniqueness_probe(run.problem, run.path_config, run.solver_config, guesses)
    return Verdict(
        "uniqueness_probe",
        _status(report.passed),
        report.max_distance,
        3 * report.pooled_standard_error,
        "max pairwise sup distance",
    )


def run_verifications(run: LoadedRun, u: SolutionField, solved: bool = False) -> list[Verdict]:
    """Verdicts of every enabled verification, in catalog order.

    Inputs:
        run: Loaded run configuration.
        u: Field to verify.
        solved: True when called right after a solve; the uniqueness probe only runs then.
    Returns:
        List of Verdict, empty when no check is enabled.
    """
    verdicts = []
    for name in run.enabled_verifications:
        logger.info("running verification %s", name)
        if name == "revuz":
            verdicts.append(_revuz(run))
        elif name == "martingale":
            verdicts.append(_martingale(run, u))
        elif name == "stampacchia":
            verdicts.append(_stampacchia(run, u))
        elif name == "duality":
            verdicts.append(_duality(run, u))
        elif name == "dynkin":
            verdicts.append(_dynkin(run, u))
        else:
            verdicts.append(_uniqueness(run, u if solved else None))
    return verdicts


def verdict_lines(verdicts: list[Verdict]) -> list[str]:
    if not verdicts:
        return ["verification: no checks enabled"]
    lines = []
    for verdict in verdicts:
        lines.extend(verdict.to_lines())
    return lines


def summary_frame(verdicts: list[Verdict]) -> pd.DataFrame:
    """Verdicts as a table for printing."""
    return pd.DataFrame(
        [
            {"check": v.name, "status": v.status, "statistic": v.statistic, "threshold": v.threshold}
            for v in verdicts
        ],
        columns=["check", "status", "statistic", "threshold"],
    )
