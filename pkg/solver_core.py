"""Probabilistic solution of -1/2 Lap u^k = f^k(x, u) + mu^k, u = 0 on the boundary.

The solution is the fixed point of

    u(x) = E_x [ int_0^zeta f(X_t, u(X_t)) dt + A^mu_zeta ],

computed by Picard iteration on a tensor grid with common random numbers
across sweeps, the truncation T_{n(m)}(f) with n(m) = n0 * 2^m, and a fresh
final sweep whose samples give the reported field and standard errors.

Path-index blocks (every node owns ``paths_per_node`` consecutive indices
inside a block):
    0  Picard sweeps (shared by every sweep)
    1  final sweep
    2  barrier
    3  barrier re-sample
    4  solution re-sample at barrier violations
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy.interpolate import RegularGridInterpolator
from sklearn.utils import gen_even_slices
from tqdm import tqdm

from geometry import Domain, OutsideDomainError
from measure_data import (
    Density,
    DiffuseMeasure,
    default_mollification,
    total_variation,
    validate,
)
from nonlinearity import Nonlinearity
from path_engine import KILLED, PathConfig, walk_batch

logger = logging.getLogger(__name__)

__all__ = [
    "BarrierViolationError",
    "ExcessiveTruncationError",
    "GridMismatchError",
    "NonConvergenceError",
    "PathwiseBound",
    "Problem",
    "ResidualStatistic",
    "SolutionField",
    "SolveReport",
    "SolverConfig",
    "StampacchiaResult",
    "UniquenessReport",
    "estimate_barrier",
    "martingale_residual",
    "pathwise_stampacchia",
    "picard_solve",
    "stampacchia_check",
    "uniqueness_probe",
]

SWEEP_BLOCK = 0
FINAL_BLOCK = 1
BARRIER_BLOCK = 2
BARRIER_RESAMPLE_BLOCK = 3
SOLUTION_RESAMPLE_BLOCK = 4
# final estimates of the uniqueness runs use blocks 5, 6, ...
UNIQUENESS_FIRST_BLOCK = 5

MAX_TRUNCATED_FRACTION = 0.01
MAX_BARRIER_VIOLATION_FRACTION = 0.01
STAMPACCHIA_SLACK = 1.05


class NonConvergenceError(RuntimeError):
    """Picard iteration hit ``max_sweeps``; ``report`` holds the history so far."""

    def __init__(self, message: str, report: "SolveReport"):
        super().__init__(message)
        self.report = report


class BarrierViolationError(RuntimeError):
    pass


class ExcessiveTruncationError(RuntimeError):
    pass


class GridMismatchError(ValueError):
    """Stored node coordinates do not match the configured grid."""


@dataclass(frozen=True)
class Problem:
    domain: Domain
    measures: tuple[DiffuseMeasure, ...]
    nonlinearity: Nonlinearity

    def __post_init__(self):
        object.__setattr__(self, "measures", tuple(self.measures))
        if len(self.measures) != self.nonlinearity.n_components:
            raise ValueError(
                f"{len(self.measures)} measures given for {self.nonlinearity.n_components} components"
            )

    @property
    def n_components(self) -> int:
        return self.nonlinearity.n_components

    @property
    def dimension(self) -> int:
        return self.domain.dimension

    def prepared(self, cfg: PathConfig) -> "Problem":
        """Fill in the default mollification width 5 sqrt(h) and validate every measure."""
        eps = default_mollification(cfg)
        measures = tuple(mu.with_default_mollification(eps) for mu in self.measures)
        for mu in measures:
            validate(mu, self.domain)
        return replace(self, measures=measures)

    def with_measures(self, measures: Sequence[DiffuseMeasure]) -> "Problem":
        return replace(self, measures=tuple(measures))

    def total_variation(self) -> float:
        """Sum of the component total variations."""
        return sum(total_variation(mu, self.domain).value for mu in self.measures)

    def barrier_measure(self) -> DiffuseMeasure:
        """sum_k |mu^k|, the measure whose potential dominates |u|."""
        total = DiffuseMeasure.zero()
        for mu in self.measures:
            total = total + mu.absolute()
        return total

    def measure_densities(self, points: np.ndarray, measures: Optional[Sequence[DiffuseMeasure]] = None) -> np.ndarray:
        measures = self.measures if measures is None else measures
        return np.column_stack([mu.density_values(points) for mu in measures])


@dataclass(frozen=True)
class SolverConfig:
    grid_resolution: int = 33
    paths_per_node: int = 1000
    max_sweeps: int = 30
    tol: Optional[float] = None
    damping: float = 1.0
    truncation_base: float = 8.0
    n_jobs: int = 1
    batch_paths: int = 16_384
    progress: bool = False

    def __post_init__(self):
        if self.grid_resolution < 3:
            raise ValueError("grid_resolution must be at least 3")
        if self.paths_per_node < 2:
            raise ValueError("paths_per_node must be at least 2 for standard errors")
        if not 0 < self.damping <= 1:
            raise ValueError(f"damping must lie in (0, 1], got {self.damping}")
        if not self.truncation_base > 0:
            raise ValueError("truncation_base must be positive")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be at least 1")

    def truncation_level(self, sweep: int) -> float:
        return self.truncation_base * 2.0**sweep


@dataclass
class SolutionField:
    """n-component field on a tensor grid over the bounding box, zero outside the domain."""

    domain: Domain
    axes: tuple[np.ndarray, ...]
    values: np.ndarray
    standard_errors: np.ndarray = None
    _interpolator: RegularGridInterpolator = field(init=False, repr=False, default=None)

    def __post_init__(self):
        shape = tuple(len(a) for a in self.axes)
        self.values = np.asarray(self.values, dtype=float).reshape(*shape, -1)
        if self.standard_errors is None:
            self.standard_errors = np.zeros_like(self.values)
        self.standard_errors = np.asarray(self.standard_errors, dtype=float).reshape(self.values.shape)
        exterior = ~self.interior_mask.reshape(shape)
        self.values[exterior] = 0.0
        self.standard_errors[exterior] = 0.0
        self._interpolator = RegularGridInterpolator(
            self.axes, self.values, method="linear", bounds_error=False, fill_value=0.0
        )

    @staticmethod
    def grid_axes(domain: Domain, resolution: int) -> tuple[np.ndarray, ...]:
        lo, hi = domain.bounding_box
        return tuple(np.linspace(lo[i], hi[i], resolution) for i in range(domain.dimension))

    @classmethod
    def zeros(cls, domain: Domain, resolution: int, n_components: int = 1) -> "SolutionField":
        axes = cls.grid_axes(domain, resolution)
        shape = tuple(len(a) for a in axes) + (n_components,)
        return cls(domain, axes, np.zeros(shape))

    @classmethod
    def from_function(
        cls, domain: Domain, resolution: int, func: Callable[[np.ndarray], np.ndarray], n_components: int = 1
    ) -> "SolutionField":
        """Sample ``func`` (points (m, d) -> (m,) or (m, n)) at the grid nodes."""
        axes = cls.grid_axes(domain, resolution)
        nodes = _mesh(axes)
        values = np.asarray(func(nodes), dtype=float).reshape(len(nodes), n_components)
        return cls(domain, axes, values.reshape(tuple(len(a) for a in axes) + (n_components,)))

    @classmethod
    def from_nodes(
        cls,
        domain: Domain,
        resolution: int,
        nodes: np.ndarray,
        values: np.ndarray,
        standard_errors: Optional[np.ndarray] = None,
        atol: float = 1e-9,
    ) -> "SolutionField":
        """Rebuild a field from interior-node rows (as stored in solution.csv).

        Raises GridMismatchError when the rows are not exactly the interior
        nodes of the configured grid, in grid order.
        """
        field_ = cls.zeros(domain, resolution, np.atleast_2d(values).shape[1] if np.ndim(values) > 1 else 1)
        expected = field_.interior_nodes
        nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
        if nodes.shape != expected.shape or not np.allclose(nodes, expected, rtol=0.0, atol=atol):
            raise GridMismatchError(
                f"stored nodes ({nodes.shape[0]} rows, dimension {nodes.shape[1]}) do not match the "
                f"{resolution}^{domain.dimension} grid with {expected.shape[0]} interior nodes"
            )
        return field_.with_interior_values(values, standard_errors)

    @property
    def dimension(self) -> int:
        return self.domain.dimension

    @property
    def n_components(self) -> int:
        return self.values.shape[-1]

    @property
    def resolution(self) -> int:
        return len(self.axes[0])

    @property
    def spacing(self) -> np.ndarray:
        return np.array([a[1] - a[0] for a in self.axes])

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def nodes(self) -> np.ndarray:
        return _mesh(self.axes)

    @property
    def interior_mask(self) -> np.ndarray:
        return self.domain.contains(self.nodes)

    @property
    def interior_nodes(self) -> np.ndarray:
        return self.nodes[self.interior_mask]

    @property
    def node_values(self) -> np.ndarray:
        return self.values.reshape(-1, self.n_components)

    @property
    def node_standard_errors(self) -> np.ndarray:
        return self.standard_errors.reshape(-1, self.n_components)

    @property
    def interior_values(self) -> np.ndarray:
        return self.node_values[self.interior_mask]

    @property
    def interior_standard_errors(self) -> np.ndarray:
        return self.node_standard_errors[self.interior_mask]

    def with_interior_values(self, values: np.ndarray, standard_errors: Optional[np.ndarray] = None) -> "SolutionField":
        mask = self.interior_mask
        n = np.atleast_2d(np.asarray(values)).shape[-1] if np.ndim(values) > 1 else 1
        full = np.zeros((len(mask), n))
        full[mask] = np.asarray(values, dtype=float).reshape(-1, n)
        full_se = np.zeros((len(mask), n))
        if standard_errors is not None:
            full_se[mask] = np.asarray(standard_errors, dtype=float).reshape(-1, n)
        shape = tuple(len(a) for a in self.axes) + (n,)
        return SolutionField(self.domain, self.axes, full.reshape(shape), full_se.reshape(shape))

    def __call__(self, points) -> np.ndarray:
        """Multilinear interpolation, set to 0 outside the domain; (m, d) -> (m, n)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        values = self._interpolator(points)
        values[~self.domain.contains(points)] = 0.0
        return values

    def evaluate(self, x) -> np.ndarray:
        return self(np.asarray(x, dtype=float)[None, :])[0]

    def scaled(self, factor: float) -> "SolutionField":
        return SolutionField(self.domain, self.axes, factor * self.values, abs(factor) * self.standard_errors)

    def perturbed(self, func: Callable[[np.ndarray], np.ndarray]) -> "SolutionField":
        """Field plus ``func`` sampled at the nodes."""
        extra = np.asarray(func(self.nodes), dtype=float).reshape(len(self.nodes), -1)
        values = self.node_values + extra
        return SolutionField(self.domain, self.axes, values.reshape(self.values.shape), self.standard_errors.copy())

    def sup_distance(self, other: "SolutionField") -> float:
        """Largest Euclidean distance between node values over interior nodes."""
        diff = self.interior_values - other.interior_values
        return float(np.max(np.linalg.norm(diff, axis=1), initial=0.0))


def _mesh(axes: Sequence[np.ndarray]) -> np.ndarray:
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


@dataclass(frozen=True)
class StampacchiaResult:
    lhs: float
    rhs: Optional[float]

    @property
    def ok(self) -> Optional[bool]:
        if self.rhs is None:
            return None
        return self.lhs <= self.rhs * STAMPACCHIA_SLACK


@dataclass
class SolveReport:
    sweeps: int = 0
    sup_change_history: list = field(default_factory=list)
    paths_per_node: int = 0
    truncation_levels: list = field(default_factory=list)
    tolerance: float = 0.0
    se_median: float = 0.0
    se_max: float = 0.0
    stampacchia: dict = field(default_factory=dict)
    barrier_violations: int = 0
    barrier_violations_first_pass: int = 0
    truncated_path_fraction: float = 0.0
    mollification: Optional[float] = None
    converged: bool = False

    def to_lines(self) -> list[str]:
        """``key: value`` lines in the fixed report order."""
        lines = [
            f"sweeps: {self.sweeps}",
            f"converged: {str(self.converged).lower()}",
            "sup_change_history: " + " ".join(f"{c:.6g}" for c in self.sup_change_history),
            f"paths_per_node: {self.paths_per_node}",
            "truncation_levels: " + " ".join(f"{t:g}" for t in self.truncation_levels),
            f"tolerance: {self.tolerance:.6g}",
            f"se_median: {self.se_median:.6g}",
            f"se_max: {self.se_max:.6g}",
            f"barrier_violations: {self.barrier_violations}",
            f"barrier_violations_first_pass: {self.barrier_violations_first_pass}",
            f"truncated_path_fraction: {self.truncated_path_fraction:.6g}",
        ]
        if self.mollification is not None:
            lines.append(f"mollification: {self.mollification:.6g}")
        for name, result in self.stampacchia.items():
            lines.append(f"stampacchia_{name}_lhs: {result.lhs:.6g}")
            lines.append(f"stampacchia_{name}_rhs: {'n/a' if result.rhs is None else f'{result.rhs:.6g}'}")
            lines.append(f"stampacchia_{name}_ok: {'n/a' if result.ok is None else str(result.ok).lower()}")
        return lines


def _node_group(
    domain: Domain,
    nodes: np.ndarray,
    node_ids: np.ndarray,
    integrand,
    n_outputs: int,
    cfg: PathConfig,
    paths_per_node: int,
    first_index: int,
) -> tuple[np.ndarray, np.ndarray, int]:
    starts = np.repeat(nodes, paths_per_node, axis=0)
    indices = (
        first_index
        + np.repeat(node_ids.astype(np.uint64), paths_per_node) * np.uint64(paths_per_node)
        + np.tile(np.arange(paths_per_node, dtype=np.uint64), len(nodes))
    )
    walk = walk_batch(domain, starts, cfg, indices, integrand, n_outputs)
    samples = walk.integrals.reshape(len(nodes), paths_per_node, n_outputs)
    mean = samples.mean(axis=1)
    se = samples.std(axis=1, ddof=1) / np.sqrt(paths_per_node)
    return mean, se, int(walk.truncated.sum())


def node_expectations(
    domain: Domain,
    nodes: np.ndarray,
    node_ids: np.ndarray,
    integrand,
    n_outputs: int,
    cfg: PathConfig,
    solver: SolverConfig,
    block: int,
    n_grid_nodes: int,
) -> tuple[np.ndarray, np.ndarray, float]:
    """E_node int_0^zeta integrand(X_t) dt for every node, with standard errors.

    Inputs:
        domain: Domain the paths are killed on leaving.
        nodes: Array (N, d) of starting nodes.
        node_ids: Grid ids of the nodes; together with ``block`` they fix the path indices.
        integrand: Map (p, d) -> (p, n_outputs).
        n_outputs: Number of integrand columns.
        cfg: Path configuration.
        solver: Supplies paths per node, batch size and worker count.
        block: Path-index block.
        n_grid_nodes: Total number of grid nodes (block stride).
    Returns:
        Tuple of (means (N, n_outputs), standard errors (N, n_outputs), truncated path fraction).
    """
    n = len(nodes)
    if n == 0:
        return np.zeros((0, n_outputs)), np.zeros((0, n_outputs)), 0.0
    P = solver.paths_per_node
    first_index = block * n_grid_nodes * P
    per_group = max(1, solver.batch_paths // P)
    slices = list(gen_even_slices(n, max(1, -(-n // per_group))))
    if solver.n_jobs == 1 or len(slices) == 1:
        parts = [
            _node_group(domain, nodes[s], node_ids[s], integrand, n_outputs, cfg, P, first_index) for s in slices
        ]
    else:
        parts = Parallel(n_jobs=solver.n_jobs, prefer="threads")(
            delayed(_node_group)(domain, nodes[s], node_ids[s], integrand, n_outputs, cfg, P, first_index)
            for s in slices
        )
    mean = np.concatenate([p[0] for p in parts])
    se = np.concatenate([p[1] for p in parts])
    truncated = sum(p[2] for p in parts) / float(n * P)
    return mean, se, truncated


def _interior(field_: SolutionField) -> tuple[np.ndarray, np.ndarray]:
    mask = field_.interior_mask
    return field_.nodes[mask], np.flatnonzero(mask)


def estimate_barrier(
    problem: Problem, cfg: PathConfig, solver: SolverConfig, block: int = BARRIER_BLOCK
) -> SolutionField:
    """Barrier v(x) = E_x int_0^zeta d|A^mu|_t with |mu| = sum_k (mu^k+ + mu^k-), one component.

    Raises ExcessiveTruncationError when more than 1% of the paths hit max_steps.
    """
    problem = problem.prepared(cfg)
    field_ = SolutionField.zeros(problem.domain, solver.grid_resolution, 1)
    absolute = problem.barrier_measure()
    if absolute.is_zero:
        return field_
    nodes, ids = _interior(field_)
    mean, se, truncated = node_expectations(
        problem.domain, nodes, ids, absolute.density_values, 1, cfg, solver, block, len(field_.nodes)
    )
    if truncated > MAX_TRUNCATED_FRACTION:
        raise ExcessiveTruncationError(
            f"{100 * truncated:.2f}% of barrier paths reached max_steps; raise max_steps or the step size"
        )
    return field_.with_interior_values(mean, se)


def _density_sup(problem: Problem, points: np.ndarray) -> float:
    sup = 0.0
    for mu in problem.measures:
        for term in mu.terms:
            if isinstance(term.kind, Density) and len(points):
                sup = max(sup, float(np.max(term.kind.weight * term.kind.expr(points))))
    return sup


def _representation_integrand(problem: Problem, u: SolutionField, f: Nonlinearity, measures):
    def integrand(points: np.ndarray) -> np.ndarray:
        return f(points, u(points)) + problem.measure_densities(points, measures)

    return integrand


def picard_solve(
    problem: Problem,
    cfg: PathConfig,
    solver: SolverConfig,
    initial: Optional[SolutionField] = None,
    check_barrier: bool = True,
    final_block: int = FINAL_BLOCK,
) -> tuple[SolutionField, SolveReport]:
    """Picard iteration on the path representation.

    Inputs:
        problem: Problem to solve; measures are mollified and validated here.
        cfg: Path configuration.
        solver: Grid, paths, tolerance, damping and truncation schedule.
        initial: Starting field; zero when omitted.
        check_barrier: Compare the result with the barrier and re-sample violating nodes once.
        final_block: Path-index block of the fresh final sweep.
    Returns:
        Tuple of (field from a fresh final sweep, SolveReport).
    """
    problem = problem.prepared(cfg)
    cfg.check_horizon(problem.domain)
    if not problem.nonlinearity.declares("A4"):
        logger.warning("nonlinearity does not declare the angle condition A4; convergence is not guaranteed")
    n = problem.n_components
    u = SolutionField.zeros(problem.domain, solver.grid_resolution, n) if initial is None else initial
    if u.resolution != solver.grid_resolution or u.n_components != n:
        raise GridMismatchError("initial field does not match the solver grid")
    nodes, ids = _interior(u)
    n_grid = len(u.nodes)
    density_sup = _density_sup(problem, nodes)

    report = SolveReport(paths_per_node=solver.paths_per_node, mollification=default_mollification(cfg))
    current = u.interior_values
    calm = 0
    sweeps = tqdm(range(solver.max_sweeps), desc="picard", unit="sweep", disable=not solver.progress)
    for sweep in sweeps:
        level = solver.truncation_level(sweep)
        f_level = problem.nonlinearity.truncated(level)
        measures = [mu.capped(level) for mu in problem.measures]
        integrand = _representation_integrand(problem, u, f_level, measures)
        estimate, se, truncated = node_expectations(
            problem.domain, nodes, ids, integrand, n, cfg, solver, SWEEP_BLOCK, n_grid
        )
        updated = (1 - solver.damping) * current + solver.damping * estimate
        change = float(np.max(np.abs(updated - current), initial=0.0))
        scale = float(np.max(np.abs(updated), initial=0.0))
        tol = solver.tol if solver.tol is not None else max(3 * float(np.median(se)) if se.size else 0.0, 1e-3 * scale)

        report.sweeps = sweep + 1
        report.sup_change_history.append(change)
        report.truncation_levels.append(level)
        report.tolerance = tol
        report.truncated_path_fraction = max(report.truncated_path_fraction, truncated)
        sweeps.set_postfix(change=f"{change:.3g}", tol=f"{tol:.3g}")
        logger.info("sweep %d: level %g, sup change %.4g (tol %.4g)", sweep + 1, level, change, tol)

        current = updated
        u = u.with_interior_values(current)
        sup_norm = float(np.max(np.linalg.norm(current, axis=1), initial=0.0))
        inactive = level > sup_norm and level > density_sup
        calm = calm + 1 if change <= tol else 0
        if calm >= 2 and inactive:
            report.converged = True
            break
    sweeps.close()

    if not report.converged:
        raise NonConvergenceError(
            f"Picard iteration did not converge in {solver.max_sweeps} sweeps "
            f"(last change {report.sup_change_history[-1]:.4g}, tol {report.tolerance:.4g})",
            report,
        )
    if report.truncated_path_fraction > 1e-3:
        logger.warning("%.3f%% of paths reached max_steps", 100 * report.truncated_path_fraction)

    level = report.truncation_levels[-1]
    final_integrand = _representation_integrand(
        problem, u, problem.nonlinearity.truncated(level), [mu.capped(level) for mu in problem.measures]
    )
    estimate, se, truncated = node_expectations(
        problem.domain, nodes, ids, final_integrand, n, cfg, solver, final_block, n_grid
    )
    report.truncated_path_fraction = max(report.truncated_path_fraction, truncated)
    solution = u.with_interior_values(estimate, se)

    if check_barrier:
        solution = _enforce_barrier(problem, cfg, solver, solution, final_integrand, report)
    if se.size:
        report.se_median = float(np.median(se))
        report.se_max = float(np.max(se))
    report.stampacchia = stampacchia_check(solution, problem)
    return solution, report


def barrier_violations(u: SolutionField, v: SolutionField) -> np.ndarray:
    """Interior-node mask where |u| > v + 3 SE (combined standard error)."""
    norm = np.linalg.norm(u.interior_values, axis=1)
    se = np.sqrt(np.sum(u.interior_standard_errors**2, axis=1) + v.interior_standard_errors[:, 0] ** 2)
    return norm > v.interior_values[:, 0] + 3 * se + 1e-12


def _enforce_barrier(
    problem: Problem,
    cfg: PathConfig,
    solver: SolverConfig,
    solution: SolutionField,
    integrand,
    report: SolveReport,
) -> SolutionField:
    v = estimate_barrier(problem, cfg, solver)
    violating = barrier_violations(solution, v)
    report.barrier_violations_first_pass = int(violating.sum())
    if not violating.any():
        return solution

    logger.info("re-sampling %d node(s) that violate the barrier", int(violating.sum()))
    nodes, ids = _interior(solution)
    n_grid = len(solution.nodes)
    values = solution.interior_values.copy()
    errors = solution.interior_standard_errors.copy()
    bad_nodes = nodes[violating]
    bad_ids = ids[violating]
    new_u, new_u_se, _ = node_expectations(
        problem.domain, bad_nodes, bad_ids, integrand, problem.n_components, cfg, solver, SOLUTION_RESAMPLE_BLOCK, n_grid
    )
    values[violating] = new_u
    errors[violating] = new_u_se
    solution = solution.with_interior_values(values, errors)

    barrier_values = v.interior_values.copy()
    barrier_errors = v.interior_standard_errors.copy()
    new_v, new_v_se, _ = node_expectations(
        problem.domain,
        bad_nodes,
        bad_ids,
        problem.barrier_measure().density_values,
        1,
        cfg,
        solver,
        BARRIER_RESAMPLE_BLOCK,
        n_grid,
    )
    barrier_values[violating] = new_v
    barrier_errors[violating] = new_v_se
    v = v.with_interior_values(barrier_values, barrier_errors)

    still = barrier_violations(solution, v)
    report.barrier_violations = int(still.sum())
    if still.mean() > MAX_BARRIER_VIOLATION_FRACTION:
        raise BarrierViolationError(
            f"{int(still.sum())} of {len(still)} interior nodes exceed the barrier after re-sampling"
        )
    return solution


@dataclass(frozen=True)
class ResidualStatistic:
    time: float
    mean: np.ndarray
    standard_error: np.ndarray

    @property
    def passed(self) -> bool:
        return bool(np.all(np.abs(self.mean) <= 3 * self.standard_error + 1e-12))

    @property
    def worst_ratio(self) -> float:
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.abs(self.mean) / self.standard_error
        ratio = np.where(np.abs(self.mean) <= 1e-12, 0.0, ratio)
        return float(np.max(ratio))


def martingale_residual(
    u: SolutionField,
    problem: Problem,
    start,
    n_paths: int,
    checkpoint_times: Sequence[float],
    cfg: PathConfig,
    first_index: int = 0,
) -> list[ResidualStatistic]:
    """Mean and SE of D(t) = u(X_{t^zeta}) - u(X_0) + int_0^{t^zeta} f(u) ds + A^mu_{t^zeta}.

    For the solution, D is a martingale started at 0, so every mean should be
    zero within 3 standard errors. u at the cemetery state is 0.
    """
    problem = problem.prepared(cfg)
    start = np.asarray(start, dtype=float)
    if not problem.domain.contains(start):
        raise OutsideDomainError(f"start {start} is not inside the domain")
    checkpoints = [int(round(t / cfg.step)) for t in checkpoint_times]
    n = problem.n_components
    f = problem.nonlinearity

    def integrand(points: np.ndarray) -> np.ndarray:
        return f(points, u(points)) + problem.measure_densities(points)

    starts = np.repeat(start[None, :], n_paths, axis=0)
    walk = walk_batch(
        problem.domain,
        starts,
        cfg,
        np.arange(first_index, first_index + n_paths),
        integrand,
        n,
        checkpoints=checkpoints,
    )
    u0 = u.evaluate(start)
    results = []
    for ci, t in enumerate(checkpoint_times):
        positions = walk.checkpoint_positions[:, ci]
        u_t = u(positions)
        dead = ~walk.checkpoint_running[:, ci] & (walk.reason == KILLED)
        u_t[dead] = 0.0
        samples = u_t - u0 + walk.checkpoint_integrals[:, ci]
        mean = samples.mean(axis=0)
        se = samples.std(axis=0, ddof=1) / np.sqrt(n_paths)
        results.append(ResidualStatistic(float(t), mean, se))
    return results


def stampacchia_check(u: SolutionField, problem: Problem) -> dict[str, StampacchiaResult]:
    """L1 bounds on f(u) by the data's total variation.

    ``l1`` is always reported (no bound asserted); ``a4doubleprime`` compares
    with ||mu||_TV and ``a5`` with ||mu||_TV / alpha when the matching
    condition is declared.
    """
    nodes = u.interior_nodes
    values = problem.nonlinearity(nodes, u.interior_values)
    lhs = float(np.sum(np.abs(values))) * u.cell_volume
    results = {"l1": StampacchiaResult(lhs, None)}
    f = problem.nonlinearity
    if not f.is_zero and not (f.declares("A4doubleprime") or f.declares("A5")):
        return results
    tv = problem.total_variation()
    if f.is_zero or f.declares("A4doubleprime"):
        results["a4doubleprime"] = StampacchiaResult(lhs, tv)
    if f.declares("A5") and f.alpha:
        results["a5"] = StampacchiaResult(lhs, tv / f.alpha)
    return results


@dataclass(frozen=True)
class PathwiseBound:
    component: int
    lhs: float
    rhs: float
    standard_error: float

    @property
    def ok(self) -> bool:
        return self.lhs - self.rhs <= 3 * self.standard_error + 1e-12


def pathwise_stampacchia(
    u: SolutionField, problem: Problem, start, cfg: PathConfig, n_paths: int, first_index: int = 0
) -> list[PathwiseBound]:
    """Per component, E_x int_0^zeta |f^k(X, u(X))| dt against E_x int_0^zeta d|A^{mu^k}|."""
    problem = problem.prepared(cfg)
    n = problem.n_components
    absolute = [mu.absolute() for mu in problem.measures]

    def integrand(points: np.ndarray) -> np.ndarray:
        f_abs = np.abs(problem.nonlinearity(points, u(points)))
        return np.column_stack([f_abs, problem.measure_densities(points, absolute)])

    starts = np.repeat(np.asarray(start, dtype=float)[None, :], n_paths, axis=0)
    walk = walk_batch(problem.domain, starts, cfg, np.arange(first_index, first_index + n_paths), integrand, 2 * n)
    lhs = walk.integrals[:, :n]
    rhs = walk.integrals[:, n:]
    diff_se = (lhs - rhs).std(axis=0, ddof=1) / np.sqrt(n_paths)
    return [
        PathwiseBound(k, float(lhs[:, k].mean()), float(rhs[:, k].mean()), float(diff_se[k])) for k in range(n)
    ]


@dataclass
class UniquenessReport:
    distances: np.ndarray
    pooled_standard_error: float
    fields: list

    @property
    def max_distance(self) -> float:
        return float(self.distances.max(initial=0.0))

    @property
    def passed(self) -> bool:
        return self.max_distance <= 3 * self.pooled_standard_error + 1e-12


def uniqueness_probe(
    problem: Problem, cfg: PathConfig, solver: SolverConfig, guesses: Sequence[SolutionField]
) -> UniquenessReport:
    """Solve from every initial guess and compare the converged fields pairwise.

    The sweeps of every run share the sweep block, so the iterations settle on
    the same sample fixed point; each run's final estimate is drawn from its own
    block, so pairwise distances are differences of independent estimates and
    are compared with their pooled standard error.

    Raises ValueError unless the nonlinearity declares A4prime, and
    NonConvergenceError when any run fails to converge.
    """
    if not problem.nonlinearity.declares("A4prime"):
        raise ValueError("the uniqueness probe needs a nonlinearity declaring A4prime")
    fields = [
        picard_solve(problem, cfg, solver, initial=g, check_barrier=False, final_block=UNIQUENESS_FIRST_BLOCK + i)[0]
        for i, g in enumerate(guesses)
    ]
    k = len(fields)
    distances = np.zeros((k, k))
    pooled = 0.0
    for i in range(k):
        for j in range(i + 1, k):
            distances[i, j] = distances[j, i] = fields[i].sup_distance(fields[j])
            se = np.sqrt(
                np.sum(fields[i].interior_standard_errors**2 + fields[j].interior_standard_errors**2, axis=1)
            )
            pooled = max(pooled, float(se.max(initial=0.0)))
    return UniquenessReport(distances, pooled, fields)
