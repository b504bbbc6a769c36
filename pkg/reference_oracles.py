"""Deterministic reference solutions and residual checks for solved fields.

- ``radial_solve``: radial ODE for balls and annuli in any dimension.
- ``fd_solve``: 5-point finite differences in d = 2 with Shortley-Weller
  treatment of curved boundaries.
- ``duality_residual``: the weak form 1/2 int grad u . grad v = int f(u) v + <mu, v>
  against smooth bump test functions.
- ``dynkin_consistency``: the sub-domain localisation
  u(x) = E_x[u(X_tau) + int_0^tau f(u) dt + A^mu_tau], tau = tau_G ^ zeta.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.integrate import cumulative_trapezoid
from scipy.sparse.linalg import splu
from sklearn.linear_model import LinearRegression

from geometry import Annulus, Ball, Domain, OutsideDomainError
from measure_data import BoxFaceSurface, Density, DiffuseMeasure, MeasureTerm, SphereSurface, sphere_area
from nonlinearity import Nonlinearity
from path_engine import KILLED, PathConfig, walk_batch
from solver_core import Problem, SolutionField

logger = logging.getLogger(__name__)

__all__ = [
    "BumpFunction",
    "ConvergenceOrder",
    "DualityResidual",
    "DynkinDiscrepancy",
    "OracleError",
    "RadialProfile",
    "TestFunctionSupportError",
    "default_bumps",
    "duality_residual",
    "dynkin_consistency",
    "fd_convergence_order",
    "fd_solve",
    "fundamental_profile_field",
    "radial_solve",
]


class OracleError(RuntimeError):
    """A reference solver failed (bad input symmetry, singular system, no convergence)."""


class TestFunctionSupportError(ValueError):
    """A test function's support is not contained in the domain."""


# ---------------------------------------------------------------------------
# radial oracle


@dataclass
class RadialProfile:
    """u(r) on increasing radii, one column per component."""

    center: np.ndarray
    radii: np.ndarray
    values: np.ndarray
    flux_jumps: list = field(default_factory=list)

    def __call__(self, r) -> np.ndarray:
        r = np.atleast_1d(np.asarray(r, dtype=float))
        inside = (r >= self.radii[0]) & (r <= self.radii[-1])
        out = np.column_stack([np.interp(r, self.radii, self.values[:, k]) for k in range(self.values.shape[1])])
        out[~inside] = 0.0
        return out

    def field(self, points) -> np.ndarray:
        """Profile evaluated at |x - center| for points (m, d)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return self(np.linalg.norm(points - self.center, axis=1))


def _phi(a, b, dimension: int):
    """int_a^b rho^(1-d) d rho."""
    a = np.asarray(a, dtype=float)
    if dimension == 2:
        return np.log(b / a)
    return (a ** (2 - dimension) - b ** (2 - dimension)) / (dimension - 2)


def _radial_potential(radii, source, dimension, surfaces, annulus: bool) -> np.ndarray:
    """Solve -1/2 (u'' + (d-1) u'/r) = source + surface masses with u(R) = 0."""
    d = dimension
    outer = radii[-1]
    q = cumulative_trapezoid(source * radii ** (d - 1), radii, initial=0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        kernel = np.where(radii > 0, 2 * q * radii ** (1 - d), 0.0)
    running = cumulative_trapezoid(kernel, radii, initial=0.0)
    u = running[-1] - running
    unit_area = sphere_area(d, 1.0)
    for r0, mass in surfaces:
        u = u + 2 * mass / unit_area * _phi(np.maximum(radii, r0), outer, d)
    if annulus:
        with np.errstate(divide="ignore"):
            phi = _phi(np.maximum(radii, radii[0]), outer, d)
        u = u - u[0] / phi[0] * phi
    return u


def _radial_measure_parts(measure, center: np.ndarray, points: np.ndarray):
    density = np.zeros(len(points))
    surfaces = []
    jumps = []
    for term in measure.terms:
        kind = term.kind
        if isinstance(kind, Density):
            density += term.sign * kind.values(points)
        elif isinstance(kind, SphereSurface):
            if not np.allclose(kind.center, center):
                raise OracleError("sphere surface terms must be concentric with the domain for the radial oracle")
            surfaces.append((kind.radius, term.sign * kind.mass))
            jumps.append((kind.radius, -2 * term.sign * kind.mass / kind.area))
        else:
            raise OracleError("box-face surface terms are not radially symmetric")
    return density, surfaces, jumps


def radial_solve(
    problem: Problem,
    n_points: int = 10_001,
    tol: float = 1e-10,
    max_iter: int = 500,
    damping: float = 1.0,
) -> RadialProfile:
    """Radial reference solution for ball and annulus problems.

    The nonlinearity and densities are sampled along the ray center + r e_1,
    so they must be radially symmetric for the profile to be meaningful.
    Semilinear problems are solved by damped Picard iteration on the 1-D grid.

    Raises:
        OracleError: non-radial domain or surface term, or no convergence.
    """
    shape = problem.domain.shape
    if isinstance(shape, Ball):
        inner, outer, annulus = 0.0, shape.radius, False
    elif isinstance(shape, Annulus):
        inner, outer, annulus = shape.r_in, shape.r_out, shape.r_in > 0
    else:
        raise OracleError(f"radial oracle needs a ball or annulus, got {type(shape).__name__}")
    if n_points < 10_001:
        logger.warning("radial oracle running on %d points, below the 10^4 reference resolution", n_points)
    d = problem.dimension
    n = problem.n_components
    center = np.asarray(shape.center, dtype=float)
    radii = np.linspace(inner, outer, n_points)
    points = center + radii[:, None] * np.eye(d)[0]

    densities = []
    surfaces = []
    jumps = []
    for mu in problem.measures:
        dens, surf, jump = _radial_measure_parts(mu, center, points)
        densities.append(dens)
        surfaces.append(surf)
        jumps.append(jump)

    f = problem.nonlinearity
    u = np.zeros((n_points, n))
    for iteration in range(1, max_iter + 1):
        source = f(points, u) if not f.is_zero else np.zeros_like(u)
        new = np.column_stack(
            [_radial_potential(radii, source[:, k] + densities[k], d, surfaces[k], annulus) for k in range(n)]
        )
        new = (1 - damping) * u + damping * new
        change = float(np.max(np.abs(new - u), initial=0.0))
        u = new
        if not np.all(np.isfinite(u)):
            raise OracleError("radial Picard iteration produced non-finite values")
        if f.is_zero or change <= tol * max(1.0, float(np.max(np.abs(u), initial=0.0))):
            break
    else:
        raise OracleError(f"radial Picard iteration did not converge in {max_iter} iterations (change {change:.3g})")
    logger.debug("radial oracle converged after %d iteration(s)", iteration)
    return RadialProfile(center, radii, u, jumps)


def fundamental_profile_field(domain: Domain, resolution: int, n_components: int = 1) -> SolutionField:
    """Grid field of the fundamental-solution profile of a ball, zero on its sphere.

    (|x - c|^(2-d) - R^(2-d)) / (d - 2) for d >= 3 and log(R / |x - c|) for d = 2;
    |x - c| is floored at half a grid spacing to keep node values finite.
    """
    shape = domain.shape
    if not isinstance(shape, Ball):
        raise OracleError("the fundamental profile is defined on balls")
    d = domain.dimension
    center = np.asarray(shape.center, dtype=float)
    floor = 0.5 * float(np.min(SolutionField.zeros(domain, resolution).spacing))

    def profile(points: np.ndarray) -> np.ndarray:
        rho = np.maximum(np.linalg.norm(points - center, axis=1), floor)
        value = _phi(rho, shape.radius, d)
        return np.repeat(value[:, None], n_components, axis=1)

    return SolutionField.from_function(domain, resolution, profile, n_components)


# ---------------------------------------------------------------------------
# finite-difference oracle


def _boundary_fraction(domain: Domain, inside: np.ndarray, outside: np.ndarray, iterations: int = 60) -> np.ndarray:
    """Fraction t in (0, 1] of the segment inside -> outside where the signed distance vanishes."""
    lo = np.zeros(len(inside))
    hi = np.ones(len(inside))
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        probe = inside + mid[:, None] * (outside - inside)
        positive = domain.signed_distance(probe) > 0
        lo = np.where(positive, mid, lo)
        hi = np.where(positive, hi, mid)
    return hi


def _fd_operator(domain: Domain, axes) -> tuple[sparse.csc_matrix, np.ndarray]:
    """Shortley-Weller matrix of -1/2 Lap with zero Dirichlet data on the interior nodes."""
    shape = tuple(len(a) for a in axes)
    grids = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    interior = domain.contains(nodes)
    number = np.full(len(nodes), -1)
    number[interior] = np.arange(interior.sum())
    spacing = [a[1] - a[0] for a in axes]
    multi = np.array(np.unravel_index(np.flatnonzero(interior), shape)).T
    rows, cols, vals = [], [], []
    ids = number[interior]
    diag = np.zeros(len(ids))
    for axis, h in enumerate(spacing):
        arms = {}
        for direction in (-1, 1):
            neighbour = multi.copy()
            neighbour[:, axis] += direction
            valid = (neighbour[:, axis] >= 0) & (neighbour[:, axis] < shape[axis])
            flat = np.full(len(multi), -1)
            flat[valid] = np.ravel_multi_index(neighbour[valid].T, shape)
            inside = valid.copy()
            inside[valid] = interior[flat[valid]]
            frac = np.ones(len(multi))
            cut = ~inside
            if cut.any():
                here = nodes[interior][cut]
                there = here.copy()
                there[:, axis] += direction * h
                frac[cut] = _boundary_fraction(domain, here, there)
            arms[direction] = (flat, inside, frac * h)
        h_minus = arms[-1][2]
        h_plus = arms[1][2]
        scale = 2.0 / (h_minus + h_plus)
        # -1/2 u'' with u'' ~ scale * ((u+ - u0)/h+ - (u0 - u-)/h-)
        diag += 0.5 * scale * (1 / h_plus + 1 / h_minus)
        for direction, arm in ((-1, h_minus), (1, h_plus)):
            flat, inside, _ = arms[direction]
            rows.append(ids[inside])
            cols.append(number[flat[inside]])
            vals.append(-0.5 * scale[inside] / arm[inside])
    rows.append(ids)
    cols.append(ids)
    vals.append(diag)
    n_unknowns = int(interior.sum())
    matrix = sparse.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_unknowns, n_unknowns)
    )
    return matrix, interior


def fd_solve(
    problem: Problem,
    resolution: int,
    mollification: Optional[float] = None,
    tol: float = 1e-10,
    max_iter: int = 500,
    damping: float = 1.0,
) -> SolutionField:
    """Finite-difference reference solution for d = 2 on the solver's grid layout.

    Surface terms are mollified onto the grid with ``mollification`` (defaults
    to the widths already stored on the measures).

    Raises:
        OracleError: wrong dimension, singular system or Picard non-convergence.
    """
    if problem.dimension != 2:
        raise OracleError(f"the finite-difference oracle is two-dimensional, got d = {problem.dimension}")
    measures = problem.measures
    if mollification is not None:
        measures = tuple(mu.with_default_mollification(mollification) for mu in measures)
    axes = SolutionField.grid_axes(problem.domain, resolution)
    matrix, interior = _fd_operator(problem.domain, axes)
    nodes = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)[interior]
    try:
        lu = splu(matrix)
    except RuntimeError as exc:
        raise OracleError(f"finite-difference system could not be factorised: {exc}") from exc

    n = problem.n_components
    data = problem.measure_densities(nodes, measures) if len(nodes) else np.zeros((0, n))
    f: Nonlinearity = problem.nonlinearity
    u = np.zeros((len(nodes), n))
    for iteration in range(1, max_iter + 1):
        rhs = data + (f(nodes, u) if not f.is_zero else 0.0)
        new = (1 - damping) * u + damping * lu.solve(np.asarray(rhs, dtype=float))
        if not np.all(np.isfinite(new)):
            raise OracleError("finite-difference iteration produced non-finite values")
        change = float(np.max(np.abs(new - u), initial=0.0))
        u = new
        if f.is_zero or change <= tol * max(1.0, float(np.max(np.abs(u), initial=0.0))):
            break
    else:
        raise OracleError(f"finite-difference Picard iteration did not converge in {max_iter} iterations")
    logger.debug("finite-difference oracle converged after %d iteration(s)", iteration)
    return SolutionField.zeros(problem.domain, resolution, n).with_interior_values(u)


@dataclass(frozen=True)
class ConvergenceOrder:
    spacings: np.ndarray
    errors: np.ndarray
    order: float

    @property
    def ratios(self) -> np.ndarray:
        """Error reduction factor between consecutive resolutions."""
        return self.errors[:-1] / self.errors[1:]


def fd_convergence_order(problem: Problem, exact, resolutions: Sequence[int] = (17, 33, 65)) -> ConvergenceOrder:
    """Fit log(max error) against log(spacing) for ``fd_solve`` over several grids.

    Inputs:
        problem: Two-dimensional problem with known solution.
        exact: Map points (m, d) -> (m,) or (m, n) giving the exact solution.
        resolutions: Grid resolutions, increasing.
    Returns:
        ConvergenceOrder with the fitted slope as ``order``.
    """
    spacings = []
    errors = []
    for resolution in resolutions:
        solution = fd_solve(problem, resolution)
        nodes = solution.interior_nodes
        reference = np.asarray(exact(nodes), dtype=float).reshape(len(nodes), -1)
        errors.append(float(np.max(np.abs(solution.interior_values - reference))))
        spacings.append(float(np.max(solution.spacing)))
    spacings = np.array(spacings)
    errors = np.array(errors)
    fit = LinearRegression().fit(np.log(spacings)[:, None], np.log(errors))
    return ConvergenceOrder(spacings, errors, float(fit.coef_[0]))


# ---------------------------------------------------------------------------
# weak-form residual


def _bump(s: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        inside = np.abs(s) < 1
        value = np.where(inside, np.exp(1 - 1 / (1 - s**2)), 0.0)
    return value


def _bump_derivative(s: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        inside = np.abs(s) < 1
        slope = np.where(inside, -2 * s / (1 - s**2) ** 2, 0.0)
    return _bump(s) * slope


@dataclass(frozen=True)
class BumpFunction:
    """v(x) = prod_i b((x_i - c_i) / w_i) with b(s) = exp(1 - 1/(1 - s^2)) on |s| < 1."""

    center: tuple[float, ...]
    widths: tuple[float, ...]

    @property
    def support(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center)
        w = np.asarray(self.widths)
        return c - w, c + w

    def _scaled(self, points: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(points) - np.asarray(self.center)) / np.asarray(self.widths)

    def __call__(self, points) -> np.ndarray:
        return np.prod(_bump(self._scaled(points)), axis=1)

    def gradient(self, points) -> np.ndarray:
        s = self._scaled(points)
        b = _bump(s)
        db = _bump_derivative(s) / np.asarray(self.widths)
        grads = np.empty_like(s)
        for i in range(s.shape[1]):
            others = np.prod(np.delete(b, i, axis=1), axis=1)
            grads[:, i] = db[:, i] * others
        return grads

    def check_support(self, domain: Domain, per_axis: int = 9) -> None:
        lo, hi = self.support
        axes = [np.linspace(lo[i], hi[i], per_axis) for i in range(domain.dimension)]
        probes = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
        if not np.all(domain.contains(probes)):
            raise TestFunctionSupportError(
                f"support of the bump at {self.center} with widths {self.widths} leaves the domain"
            )


def default_bumps(domain: Domain, count: int = 5, seed: int = 0, margin: float = 0.8) -> list[BumpFunction]:
    """``count`` bumps at varied interior centers with supports fitting inside the domain."""
    rng = np.random.default_rng([seed, 0xB7])
    candidates = domain.sample_interior(64 * count, rng)
    distance = domain.signed_distance(candidates)
    order = np.argsort(-distance)
    bumps = []
    for i in order:
        if len(bumps) == count:
            break
        c = candidates[i]
        if any(np.linalg.norm(c - np.asarray(b.center)) < 0.25 * distance[i] for b in bumps):
            continue
        width = margin * distance[i] / np.sqrt(domain.dimension)
        bump = BumpFunction(tuple(c), (width,) * domain.dimension)
        try:
            bump.check_support(domain)
        except TestFunctionSupportError:
            continue
        bumps.append(bump)
    return bumps


def _interpolation_matrix(field_: SolutionField, points: np.ndarray) -> sparse.csr_matrix:
    """Sparse multilinear interpolation weights, points (m, d) -> grid nodes."""
    axes = field_.axes
    shape = tuple(len(a) for a in axes)
    lo = np.array([a[0] for a in axes])
    spacing = field_.spacing
    scaled = (points - lo) / spacing
    base = np.clip(np.floor(scaled).astype(int), 0, np.array(shape) - 2)
    t = np.clip(scaled - base, 0.0, 1.0)
    rows, cols, vals = [], [], []
    row_ids = np.arange(len(points))
    for bits in itertools.product((0, 1), repeat=len(axes)):
        bits = np.array(bits)
        corner = base + bits
        weight = np.prod(np.where(bits == 1, t, 1 - t), axis=1)
        rows.append(row_ids)
        cols.append(np.ravel_multi_index(corner.T, shape))
        vals.append(weight)
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(points), int(np.prod(shape))),
    )


@dataclass(frozen=True)
class DualityResidual:
    component: int
    test_index: int
    energy: float
    nonlinear: float
    measure: float
    budget: float

    @property
    def residual(self) -> float:
        return self.energy - self.nonlinear - self.measure

    @property
    def passed(self) -> bool:
        return abs(self.residual) <= self.budget + 1e-12


def _surface_pairing(problem: Problem, k: int, v: BumpFunction) -> float:
    total = 0.0
    for term in problem.measures[k].terms:
        kind = term.kind
        if isinstance(kind, (SphereSurface, BoxFaceSurface)):
            nodes, weights = kind.surface_points(order=48)
            total += term.sign * kind.mass * float(np.sum(weights * v(nodes)))
    return total


def _weak_form_terms(u: SolutionField, problem: Problem, v: BumpFunction, per_axis: int):
    """Energy, nonlinear and density terms on a midpoint grid over the support of ``v``.

    Returns per-component arrays plus the energy coefficient vectors and
    boundary-layer mass needed for the error budget.
    """
    d = u.dimension
    n = u.n_components
    lo, hi = v.support
    widths = (hi - lo) / per_axis
    axes = [lo[i] + widths[i] * (np.arange(per_axis) + 0.5) for i in range(d)]
    points = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    weight = float(np.prod(widths))
    v_values = v(points)
    v_grad = v.gradient(points)
    nodal = u.node_values
    interior_nodes = u.interior_mask
    spacing = u.spacing

    # gradient of the interpolant by central differences at the grid spacing
    exterior = (~interior_nodes).astype(float)
    energy_map = sparse.csr_matrix((len(points), len(nodal)))
    layer = np.zeros(len(points), dtype=bool)
    for a in range(d):
        step = np.zeros(d)
        step[a] = spacing[a]
        plus = _interpolation_matrix(u, points + step)
        minus = _interpolation_matrix(u, points - step)
        layer |= (plus @ exterior > 0) | (minus @ exterior > 0)
        energy_map = energy_map + sparse.diags(0.5 * weight * v_grad[:, a] / (2 * spacing[a])) @ (plus - minus)
    energy_rows = sparse.diags((~layer).astype(float)) @ energy_map
    coefficients = np.asarray(energy_rows.sum(axis=0)).ravel()
    energy = coefficients @ nodal
    layer_rows = sparse.diags(layer.astype(float)) @ energy_map
    layer_mass = np.abs(layer_rows @ nodal).sum(axis=0)

    at_points = _interpolation_matrix(u, points)
    u_points = at_points @ nodal
    f = problem.nonlinearity
    f_values = f(points, u_points)
    nonlinear = weight * (f_values * v_values[:, None]).sum(axis=0)
    densities = problem.measure_densities(points, [_densities_only(mu) for mu in problem.measures])
    density_part = weight * (densities * v_values[:, None]).sum(axis=0)

    return {
        "energy": energy,
        "nonlinear": nonlinear,
        "density": density_part,
        "energy_coefficients": coefficients,
        "layer_mass": layer_mass,
        "at_points": at_points,
        "points": points,
        "u_points": u_points,
        "weights": weight * v_values,
    }


def _densities_only(mu: DiffuseMeasure) -> DiffuseMeasure:
    return DiffuseMeasure(tuple(MeasureTerm(t.sign, t.kind) for t in mu.terms if isinstance(t.kind, Density)))


def _nonlinear_sensitivity(problem: Problem, terms: dict, k: int, eta: float = 1e-6) -> np.ndarray:
    """d/du_node of int f^k(u) v, one column per component of u."""
    f = problem.nonlinearity
    points = terms["points"]
    u_points = terms["u_points"]
    columns = []
    for j in range(problem.n_components):
        shift = np.zeros_like(u_points)
        shift[:, j] = eta
        slope = (f(points, u_points + shift)[:, k] - f(points, u_points - shift)[:, k]) / (2 * eta)
        columns.append(terms["at_points"].T @ (terms["weights"] * slope))
    return np.column_stack(columns)


def duality_residual(
    u: SolutionField, problem: Problem, tests: Sequence[BumpFunction], per_axis: int = 32
) -> list[DualityResidual]:
    """Residual of the weak form for each component and test function.

    The budget is 3 MC standard errors propagated linearly from the node
    errors, plus the change of the residual between ``per_axis`` and
    ``per_axis // 2`` quadrature points, plus the boundary-layer mass left out
    of the energy term.

    Raises:
        TestFunctionSupportError: a test function reaches outside the domain.
    """
    for v in tests:
        v.check_support(problem.domain)
    results = []
    se = u.node_standard_errors
    for index, v in enumerate(tests):
        fine = _weak_form_terms(u, problem, v, per_axis)
        coarse = _weak_form_terms(u, problem, v, max(4, per_axis // 2))
        for k in range(u.n_components):
            surface = _surface_pairing(problem, k, v)
            measure_term = float(fine["density"][k]) + surface
            residual_fine = fine["energy"][k] - fine["nonlinear"][k] - measure_term
            residual_coarse = coarse["energy"][k] - coarse["nonlinear"][k] - float(coarse["density"][k]) - surface
            sensitivity = -_nonlinear_sensitivity(problem, fine, k) if not problem.nonlinearity.is_zero else 0.0
            sensitivity = np.zeros_like(se) + sensitivity
            sensitivity[:, k] += fine["energy_coefficients"]
            mc = 3 * float(np.sqrt(np.sum((sensitivity * se) ** 2)))
            budget = mc + abs(residual_fine - residual_coarse) + float(fine["layer_mass"][k])
            results.append(
                DualityResidual(
                    k, index, float(fine["energy"][k]), float(fine["nonlinear"][k]), measure_term, budget
                )
            )
    return results


# ---------------------------------------------------------------------------
# sub-domain localisation


@dataclass(frozen=True)
class DynkinDiscrepancy:
    start: np.ndarray
    discrepancy: np.ndarray
    standard_error: np.ndarray

    @property
    def passed(self) -> bool:
        return bool(np.all(np.abs(self.discrepancy) <= 3 * self.standard_error + 1e-12))


def dynkin_consistency(
    u: SolutionField,
    problem: Problem,
    g_domain: Domain,
    starts,
    n_paths: int,
    cfg: PathConfig,
    first_index: int = 0,
) -> list[DynkinDiscrepancy]:
    """E_x[u(X_tau) + int_0^tau f(u) dt + A^mu_tau] - u(x) for each start, tau = tau_G ^ zeta.

    u(X_tau) is 0 for paths killed on the outer boundary before leaving G.
    """
    problem = problem.prepared(cfg)
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    if not np.all(g_domain.contains(starts)):
        raise OutsideDomainError("every start must lie inside the sub-domain")
    n = problem.n_components
    f = problem.nonlinearity

    def integrand(points: np.ndarray) -> np.ndarray:
        return f(points, u(points)) + problem.measure_densities(points)

    results = []
    for number, start in enumerate(starts):
        first = first_index + number * n_paths
        walk = walk_batch(
            problem.domain,
            np.repeat(start[None, :], n_paths, axis=0),
            cfg,
            np.arange(first, first + n_paths),
            integrand,
            n,
            stop_domain=g_domain,
        )
        u_stop = u(walk.final_positions)
        u_stop[walk.reason == KILLED] = 0.0
        samples = u_stop + walk.integrals
        discrepancy = samples.mean(axis=0) - u.evaluate(start)
        se = samples.std(axis=0, ddof=1) / np.sqrt(n_paths)
        results.append(DynkinDiscrepancy(start, discrepancy, se))
    return results
