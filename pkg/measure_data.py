"""Signed diffuse measures and their additive functionals along killed paths.

Measures are stored in Jordan form: a list of terms, each a non-negative
measure with a sign. Only kinds that cannot charge capacity-null sets exist:
absolutely continuous densities and (d-1)-dimensional surface measures on
spheres and box faces. Point masses are not representable.

Along a path, a surface term is realised by its mollification: the mass spread
uniformly over the shell of half-width epsilon around the surface, so the
additive functional A^mu is the occupation integral of the mollified density.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np
from scipy.special import gamma

from expressions import Expression, parse_expression
from geometry import DimensionMismatchError, Domain
from path_engine import KilledPath, PathConfig, occupation_partials, walk_batch

logger = logging.getLogger(__name__)

__all__ = [
    "AdditiveAccumulation",
    "BoxFaceSurface",
    "Density",
    "DiffuseMeasure",
    "MeasureTerm",
    "MeasureValidationError",
    "NegativeDensity",
    "NonFiniteDensity",
    "QuadratureError",
    "RevuzResult",
    "SphereSurface",
    "SurfaceOutsideDomain",
    "TotalVariation",
    "accumulate",
    "face_nodes",
    "potential_mass_check",
    "revuz_check",
    "sphere_area",
    "sphere_nodes",
    "total_variation",
    "validate",
]

MOLLIFICATION_FACTOR = 5.0


class MeasureValidationError(ValueError):
    """A measure does not fit the domain it is used on."""


class SurfaceOutsideDomain(MeasureValidationError):
    pass


class NonFiniteDensity(MeasureValidationError):
    pass


class NegativeDensity(MeasureValidationError):
    pass


class QuadratureError(RuntimeError):
    """Mass quadrature did not settle between two resolutions."""


def sphere_area(dimension: int, radius: float) -> float:
    """Surface area of the sphere of ``radius`` in R^dimension."""
    return float(2 * np.pi ** (dimension / 2) / gamma(dimension / 2) * radius ** (dimension - 1))


def sphere_nodes(dimension: int, order: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Fixed quadrature nodes on the unit sphere with weights summing to one.

    d = 2 uses the trapezoid rule in angle, d = 3 a Gauss-Legendre rule in
    cos(theta) times the trapezoid rule in phi; higher dimensions fall back to a
    fixed pseudo-random point set with equal weights.
    """
    if dimension == 2:
        angles = 2 * np.pi * np.arange(4 * order) / (4 * order)
        nodes = np.column_stack([np.cos(angles), np.sin(angles)])
        return nodes, np.full(len(nodes), 1.0 / len(nodes))
    if dimension == 3:
        cos_t, w_t = np.polynomial.legendre.leggauss(order)
        phi = 2 * np.pi * np.arange(2 * order) / (2 * order)
        sin_t = np.sqrt(1 - cos_t**2)
        nodes = np.stack(
            [
                np.outer(sin_t, np.cos(phi)).ravel(),
                np.outer(sin_t, np.sin(phi)).ravel(),
                np.repeat(cos_t, len(phi)),
            ],
            axis=1,
        )
        weights = np.repeat(w_t, len(phi)) / (2.0 * len(phi))
        return nodes, weights
    rng = np.random.default_rng(7919)
    nodes = rng.standard_normal((64 * order, dimension))
    nodes /= np.linalg.norm(nodes, axis=1, keepdims=True)
    return nodes, np.full(len(nodes), 1.0 / len(nodes))


@dataclass(frozen=True)
class Density:
    """Absolutely continuous term weight * g(x) dx, optionally capped at a level."""

    expr: Expression
    weight: float = 1.0
    cap: Optional[float] = None

    @classmethod
    def from_text(cls, text: str) -> "Density":
        return cls(parse_expression(text))

    def values(self, points: np.ndarray) -> np.ndarray:
        g = self.weight * self.expr(points)
        if self.cap is not None:
            g = np.minimum(g, self.cap)
        return g


@dataclass(frozen=True)
class SphereSurface:
    """Mass spread uniformly over the sphere |x - center| = radius."""

    center: tuple[float, ...]
    radius: float
    mass: float
    mollification: Optional[float] = None

    @property
    def dimension(self) -> int:
        return len(self.center)

    @property
    def area(self) -> float:
        return sphere_area(self.dimension, self.radius)

    def values(self, points: np.ndarray) -> np.ndarray:
        eps = _require_mollification(self)
        rho = np.linalg.norm(points - np.asarray(self.center), axis=-1)
        shell = np.abs(rho - self.radius) < eps
        return np.where(shell, self.mass / (self.area * 2 * eps), 0.0)

    def surface_points(self, order: int = 32) -> tuple[np.ndarray, np.ndarray]:
        nodes, weights = sphere_nodes(self.dimension, order)
        return np.asarray(self.center) + self.radius * nodes, weights

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        directions = rng.standard_normal((n, self.dimension))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        return np.asarray(self.center) + self.radius * directions


@dataclass(frozen=True)
class BoxFaceSurface:
    """Mass spread uniformly over the flat face {x_axis = level, lo_i <= x_i <= hi_i}."""

    axis: int
    level: float
    lo: tuple[float, ...]
    hi: tuple[float, ...]
    mass: float
    mollification: Optional[float] = None

    @property
    def dimension(self) -> int:
        return len(self.lo)

    @property
    def other_axes(self) -> list[int]:
        return [i for i in range(self.dimension) if i != self.axis]

    @property
    def area(self) -> float:
        return float(np.prod([self.hi[i] - self.lo[i] for i in self.other_axes]))

    def _on_face(self, points: np.ndarray) -> np.ndarray:
        inside = np.ones(len(points), dtype=bool)
        for i in self.other_axes:
            inside &= (points[:, i] >= self.lo[i]) & (points[:, i] <= self.hi[i])
        return inside

    def values(self, points: np.ndarray) -> np.ndarray:
        eps = _require_mollification(self)
        shell = (np.abs(points[:, self.axis] - self.level) < eps) & self._on_face(points)
        return np.where(shell, self.mass / (self.area * 2 * eps), 0.0)

    def surface_points(self, order: int = 32) -> tuple[np.ndarray, np.ndarray]:
        nodes, weights = face_nodes(self, order)
        return nodes, weights

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        points = np.empty((n, self.dimension))
        points[:, self.axis] = self.level
        for i in self.other_axes:
            points[:, i] = rng.uniform(self.lo[i], self.hi[i], size=n)
        return points


def face_nodes(face: BoxFaceSurface, order: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss-Legendre nodes on a box face, weights summing to one."""
    s, w = np.polynomial.legendre.leggauss(order)
    axes_nodes = []
    axes_weights = []
    for i in face.other_axes:
        half = 0.5 * (face.hi[i] - face.lo[i])
        axes_nodes.append(face.lo[i] + half * (s + 1))
        axes_weights.append(w / 2.0)
    mesh = np.meshgrid(*axes_nodes, indexing="ij")
    wmesh = np.meshgrid(*axes_weights, indexing="ij")
    nodes = np.empty((mesh[0].size, face.dimension))
    nodes[:, face.axis] = face.level
    for col, i in enumerate(face.other_axes):
        nodes[:, i] = mesh[col].ravel()
    weights = np.prod([wm.ravel() for wm in wmesh], axis=0)
    return nodes, weights


SurfaceKind = Union[SphereSurface, BoxFaceSurface]
TermKind = Union[Density, SphereSurface, BoxFaceSurface]


def _require_mollification(term: SurfaceKind) -> float:
    if term.mollification is None or term.mollification <= 0:
        raise MeasureValidationError(
            "surface term has no mollification width; call DiffuseMeasure.with_default_mollification first"
        )
    return term.mollification


@dataclass(frozen=True)
class MeasureTerm:
    sign: int
    kind: TermKind

    def __post_init__(self):
        if self.sign not in (1, -1):
            raise ValueError(f"measure term sign must be +1 or -1, got {self.sign}")
        if isinstance(self.kind, (SphereSurface, BoxFaceSurface)) and self.kind.mass < 0:
            raise ValueError("surface masses must be non-negative; carry the sign on the term")


@dataclass(frozen=True)
class DiffuseMeasure:
    """Signed diffuse measure mu = mu+ - mu- as a tuple of signed terms."""

    terms: tuple[MeasureTerm, ...] = field(default_factory=tuple)

    @classmethod
    def zero(cls) -> "DiffuseMeasure":
        return cls(())

    @classmethod
    def density(cls, text: str, sign: int = 1) -> "DiffuseMeasure":
        return cls((MeasureTerm(sign, Density.from_text(text)),))

    @property
    def is_zero(self) -> bool:
        return not self.terms

    @property
    def is_positive(self) -> bool:
        return all(term.sign == 1 for term in self.terms)

    def __add__(self, other: "DiffuseMeasure") -> "DiffuseMeasure":
        return DiffuseMeasure(self.terms + other.terms)

    def scaled(self, factor: float) -> "DiffuseMeasure":
        """The measure factor * mu, kept in Jordan form."""
        if factor == 0:
            return DiffuseMeasure.zero()
        sign = 1 if factor > 0 else -1
        size = abs(factor)
        terms = []
        for term in self.terms:
            kind = term.kind
            if isinstance(kind, Density):
                kind = replace(kind, weight=kind.weight * size, cap=None if kind.cap is None else kind.cap * size)
            else:
                kind = replace(kind, mass=kind.mass * size)
            terms.append(MeasureTerm(term.sign * sign, kind))
        return DiffuseMeasure(tuple(terms))

    def absolute(self) -> "DiffuseMeasure":
        """|mu| = mu+ + mu- as stored (term-wise, no cancellation)."""
        return DiffuseMeasure(tuple(MeasureTerm(1, term.kind) for term in self.terms))

    def capped(self, level: float) -> "DiffuseMeasure":
        """Densities truncated at ``level``; surface terms are kept whole."""
        terms = []
        for term in self.terms:
            kind = term.kind
            if isinstance(kind, Density):
                cap = level if kind.cap is None else min(kind.cap, level)
                kind = replace(kind, cap=cap)
            terms.append(MeasureTerm(term.sign, kind))
        return DiffuseMeasure(tuple(terms))

    def with_default_mollification(self, eps: float) -> "DiffuseMeasure":
        terms = []
        for term in self.terms:
            kind = term.kind
            if isinstance(kind, (SphereSurface, BoxFaceSurface)) and kind.mollification is None:
                kind = replace(kind, mollification=eps)
            terms.append(MeasureTerm(term.sign, kind))
        return DiffuseMeasure(tuple(terms))

    def density_values(self, points: np.ndarray) -> np.ndarray:
        """Signed mollified density at ``points`` of shape (m, d)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        total = np.zeros(len(points))
        for term in self.terms:
            total += term.sign * term.kind.values(points)
        return total

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return self.density_values(points)

    def pair(self, test_function: Callable[[np.ndarray], np.ndarray], domain: Domain, resolution: int = 64) -> float:
        """<mu, v> with exact surface quadrature and grid quadrature for densities."""
        total = 0.0
        for term in self.terms:
            kind = term.kind
            if isinstance(kind, Density):
                nodes, cell = _midpoint_grid(domain, resolution)
                total += term.sign * cell * float(np.sum(kind.values(nodes) * test_function(nodes)))
            else:
                nodes, weights = kind.surface_points()
                total += term.sign * kind.mass * float(np.sum(weights * test_function(nodes)))
        return total


def default_mollification(cfg: PathConfig) -> float:
    """Shell half-width 5 sqrt(h) used for surface terms without an explicit width."""
    return MOLLIFICATION_FACTOR * float(np.sqrt(cfg.step))


def _midpoint_grid(domain: Domain, resolution: int) -> tuple[np.ndarray, float]:
    """Cell midpoints of a tensor grid over the bounding box that lie inside the domain."""
    lo, hi = domain.bounding_box
    resolution = max(2, min(resolution, int(2e6 ** (1.0 / domain.dimension))))
    widths = (hi - lo) / resolution
    axes = [lo[i] + widths[i] * (np.arange(resolution) + 0.5) for i in range(domain.dimension)]
    mesh = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=1)
    nodes = nodes[domain.contains(nodes)]
    return nodes, float(np.prod(widths))


def _check_dimension(kind: TermKind, domain: Domain) -> None:
    if isinstance(kind, (SphereSurface, BoxFaceSurface)) and kind.dimension != domain.dimension:
        raise DimensionMismatchError(
            f"surface term of dimension {kind.dimension} on a domain of dimension {domain.dimension}"
        )


def validate(measure: DiffuseMeasure, domain: Domain, resolution: int = 32) -> None:
    """Check that every term fits ``domain``.

    Surface terms must lie inside the domain with margin epsilon; densities
    must be finite and non-negative on a sample grid. Raises a
    MeasureValidationError subclass on failure and returns None otherwise.
    """
    for number, term in enumerate(measure.terms, start=1):
        kind = term.kind
        _check_dimension(kind, domain)
        if isinstance(kind, Density):
            nodes, _ = _midpoint_grid(domain, resolution)
            values = kind.expr(nodes)
            if not np.all(np.isfinite(values)):
                raise NonFiniteDensity(f"term {number}: density {kind.expr.text!r} is not finite on the domain")
            if np.any(values < 0):
                raise NegativeDensity(
                    f"term {number}: density {kind.expr.text!r} takes negative values; carry the sign on the term"
                )
        else:
            eps = _require_mollification(kind)
            points, _ = kind.surface_points(order=24)
            margin = domain.signed_distance(points)
            if np.any(margin <= eps):
                raise SurfaceOutsideDomain(
                    f"term {number}: surface comes within {margin.min():.4g} of the boundary, "
                    f"needs more than the mollification width {eps:.4g}"
                )


@dataclass(frozen=True)
class TotalVariation:
    value: float
    error: float


def _term_mass(kind: TermKind, domain: Domain, resolution: int) -> tuple[float, float]:
    if not isinstance(kind, Density):
        return float(kind.mass), 0.0
    fine_nodes, fine_cell = _midpoint_grid(domain, resolution)
    coarse_nodes, coarse_cell = _midpoint_grid(domain, max(2, resolution // 2))
    fine = fine_cell * float(np.sum(kind.values(fine_nodes)))
    coarse = coarse_cell * float(np.sum(kind.values(coarse_nodes)))
    error = abs(fine - coarse)
    if not np.isfinite(fine) or error > 0.1 * abs(fine) + 1e-12:
        raise QuadratureError(
            f"density {kind.expr.text!r}: mass changed from {coarse:.6g} to {fine:.6g} between resolutions"
        )
    return fine, error


def total_variation(measure: DiffuseMeasure, domain: Domain, resolution: int = 64) -> TotalVariation:
    """Sum of the stored term masses, with the quadrature error estimate of the density terms.

    Inputs:
        measure: Validated measure.
        domain: Domain the densities are integrated over.
        resolution: Midpoint-rule cells per axis; the error estimate compares with half of it.
    Returns:
        TotalVariation(value, error).
    """
    value = 0.0
    error = 0.0
    for term in measure.terms:
        mass, err = _term_mass(term.kind, domain, resolution)
        value += mass
        error += err
    return TotalVariation(value, error)


@dataclass
class AdditiveAccumulation:
    total: float
    partials: Optional[np.ndarray] = None


def accumulate(measure: DiffuseMeasure, path: KilledPath, keep_partials: bool = True) -> AdditiveAccumulation:
    """A^mu along ``path`` up to its lifetime (mollified local time for surface terms)."""
    if measure.is_zero:
        zeros = np.zeros(path.lifetime_index + 1)
        return AdditiveAccumulation(0.0, zeros if keep_partials else None)
    partials = occupation_partials(path, measure.density_values)[:, 0]
    return AdditiveAccumulation(float(partials[-1]), partials if keep_partials else None)


@dataclass(frozen=True)
class RevuzResult:
    lhs: float
    rhs: float
    lhs_se: float
    rhs_se: float
    variance_exploded: bool = False

    @property
    def standard_error(self) -> float:
        return float(np.hypot(self.lhs_se, self.rhs_se))

    @property
    def passed(self) -> bool:
        return abs(self.lhs - self.rhs) <= 3 * self.standard_error + 1e-12


def _mean_se(samples: np.ndarray) -> tuple[float, float]:
    if len(samples) < 2:
        return float(np.sum(samples)), 0.0
    return float(samples.mean()), float(samples.std(ddof=1) / np.sqrt(len(samples)))


def revuz_check(
    measure: DiffuseMeasure,
    domain: Domain,
    f: Callable[[np.ndarray], np.ndarray],
    h: Callable[[np.ndarray], np.ndarray],
    t: float,
    n_paths: int,
    cfg: PathConfig,
) -> RevuzResult:
    """Estimate both sides of the Revuz pairing with independent path sets.

    lhs = E_{h.m} int_0^t f(X_s) dA^mu_s from starts drawn uniformly in the
    bounding box and weighted by 1_Omega * h * vol(box). rhs = int_0^t <f.mu, p_s h> ds,
    written as the mu-average of f(y) E_y int_0^{t ^ zeta} h(X_s) ds with y drawn
    exactly from each term (no mollification).
    """
    steps = int(round(t / cfg.step))
    if steps == 0 or measure.is_zero:
        return RevuzResult(0.0, 0.0, 0.0, 0.0)
    horizon = PathConfig(cfg.step, steps, cfg.exit_tolerance_factor, cfg.base_seed)
    rng = np.random.default_rng([cfg.base_seed, 0x5EED])
    lo, hi = domain.bounding_box
    box_volume = domain.box_volume()

    starts = rng.uniform(lo, hi, size=(n_paths, domain.dimension))
    inside = domain.contains(starts)
    lhs_samples = np.zeros(n_paths)
    if inside.any():
        walk = walk_batch(
            domain,
            starts[inside],
            horizon,
            np.flatnonzero(inside),
            integrand=lambda p: f(p) * measure.density_values(p),
        )
        lhs_samples[inside] = box_volume * h(starts[inside]) * walk.integrals[:, 0]
    lhs, lhs_se = _mean_se(lhs_samples)

    rhs = 0.0
    rhs_var = 0.0
    for number, term in enumerate(measure.terms, start=1):
        kind = term.kind
        first = number * n_paths
        if isinstance(kind, Density):
            ys = rng.uniform(lo, hi, size=(n_paths, domain.dimension))
            weights = np.where(domain.contains(ys), box_volume * kind.values(ys), 0.0)
        else:
            ys = kind.sample_surface(n_paths, rng)
            weights = np.full(n_paths, float(kind.mass))
        samples = np.zeros(n_paths)
        live = (weights != 0) & domain.contains(ys)
        if live.any():
            walk = walk_batch(domain, ys[live], horizon, first + np.flatnonzero(live), integrand=h)
            samples[live] = weights[live] * f(ys[live]) * walk.integrals[:, 0]
        mean, se = _mean_se(samples)
        rhs += term.sign * mean
        rhs_var += se**2

    rhs_se = float(np.sqrt(rhs_var))
    scale = max(abs(lhs), abs(rhs), 1e-300)
    exploded = not np.isfinite(lhs_se + rhs_se) or (lhs_se + rhs_se) > 10 * scale
    if exploded:
        logger.warning("revuz check: variance estimate exploded (lhs_se=%g, rhs_se=%g)", lhs_se, rhs_se)
    return RevuzResult(lhs, rhs, lhs_se, rhs_se, exploded)


def potential_mass_check(
    measure: DiffuseMeasure, domain: Domain, n_paths: int, cfg: PathConfig, resolution: int = 64
) -> tuple[float, float, float]:
    """Compare E_m int_0^zeta dA^{|mu|} with max_x (R^2 - |x|^2)/d * ||mu||_TV.

    Returns:
        Tuple (lhs, lhs standard error, rhs).
    """
    absolute = measure.absolute()
    rng = np.random.default_rng([cfg.base_seed, 0xB0D])
    lo, hi = domain.bounding_box
    starts = rng.uniform(lo, hi, size=(n_paths, domain.dimension))
    inside = domain.contains(starts)
    samples = np.zeros(n_paths)
    if inside.any():
        walk = walk_batch(domain, starts[inside], cfg, np.flatnonzero(inside), integrand=absolute.density_values)
        samples[inside] = domain.box_volume() * walk.integrals[:, 0]
    lhs, se = _mean_se(samples)
    rhs = domain.max_exit_time_bound() * total_variation(measure, domain, resolution).value
    return lhs, se, rhs
