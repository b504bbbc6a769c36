"""TOML run configurations: schema, catalog lookup and construction of solver objects.

A run file names a domain shape, measure terms per component, a nonlinearity,
path and solver parameters, and the verifications to run. Catalog names are
checked before the schema so that a misspelt kind gets a suggestion.
"""
from __future__ import annotations

import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from expressions import ExpressionError, parse_expression
from geometry import Annulus, Ball, Box, Difference, Domain, Intersection
from measure_data import BoxFaceSurface, Density, DiffuseMeasure, MeasureTerm, SphereSurface
from nonlinearity import (
    CONDITIONS,
    Componentwise,
    CubicDecay,
    ExpressionVector,
    LinearDecay,
    Nonlinearity,
    Rotation,
    Zero,
)
from path_engine import DEFAULT_EXIT_TOLERANCE_FACTOR, PathConfig
from solver_core import Problem, SolverConfig
from utils import suggest_name

logger = logging.getLogger(__name__)

__all__ = ["ConfigError", "LoadedRun", "RunConfig", "load_run", "parse_run"]

DOMAIN_SHAPES = ("ball", "box", "annulus", "intersection", "difference")
MEASURE_KINDS = ("density", "sphere_surface", "box_face")
NONLINEARITY_KINDS = ("zero", "linear_decay", "rotation", "cubic_decay", "componentwise", "expression")
VERIFICATIONS = ("revuz", "martingale", "stampacchia", "duality", "dynkin", "uniqueness_probe")


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BallSpec(_Strict):
    shape: str
    center: list[float]
    radius: float = Field(gt=0)


class BoxSpec(_Strict):
    shape: str
    lo: list[float]
    hi: list[float]


class AnnulusSpec(_Strict):
    shape: str
    center: list[float]
    r_in: float = Field(ge=0)
    r_out: float = Field(gt=0)


class IntersectionSpec(_Strict):
    shape: str
    children: list[dict[str, Any]] = Field(min_length=1)


class DifferenceSpec(_Strict):
    shape: str
    minuend: dict[str, Any]
    subtrahend: dict[str, Any]


DOMAIN_SCHEMAS = {
    "ball": BallSpec,
    "box": BoxSpec,
    "annulus": AnnulusSpec,
    "intersection": IntersectionSpec,
    "difference": DifferenceSpec,
}


class DensitySpec(_Strict):
    kind: str
    sign: int = 1
    component: int = Field(default=1, ge=1)
    expr: str


class SphereSurfaceSpec(_Strict):
    kind: str
    sign: int = 1
    component: int = Field(default=1, ge=1)
    center: list[float]
    radius: float = Field(gt=0)
    mass: float = Field(ge=0)
    mollification: Optional[float] = Field(default=None, gt=0)


class BoxFaceSpec(_Strict):
    kind: str
    sign: int = 1
    component: int = Field(default=1, ge=1)
    axis: int = Field(ge=1)
    level: float
    lo: list[float]
    hi: list[float]
    mass: float = Field(ge=0)
    mollification: Optional[float] = Field(default=None, gt=0)


MEASURE_SCHEMAS = {"density": DensitySpec, "sphere_surface": SphereSurfaceSpec, "box_face": BoxFaceSpec}


class NonlinearitySpec(_Strict):
    kind: str = "zero"
    n_components: Optional[int] = Field(default=None, ge=1)
    exprs: list[str] = Field(default_factory=list)
    alpha: Optional[float] = Field(default=None, gt=0)
    declared: list[str] = Field(default_factory=list)


class PathsSpec(_Strict):
    step: float = Field(default=1e-3, gt=0)
    max_steps: int = Field(default=20_000, ge=1)
    exit_tolerance_factor: float = Field(default=DEFAULT_EXIT_TOLERANCE_FACTOR, ge=0)


class SolverSpec(_Strict):
    grid_resolution: int = Field(default=33, ge=3)
    paths_per_node: int = Field(default=1000, ge=2)
    max_sweeps: int = Field(default=30, ge=1)
    tol: Optional[float] = Field(default=None, gt=0)
    damping: float = Field(default=1.0, gt=0, le=1)
    truncation_base: float = Field(default=8.0, gt=0)


class VerificationSpec(_Strict):
    revuz: bool = False
    martingale: bool = False
    stampacchia: bool = False
    duality: bool = False
    dynkin: bool = False
    uniqueness_probe: bool = False
    n_paths: int = Field(default=4000, ge=2)
    start: Optional[list[float]] = None
    checkpoint_times: list[float] = Field(default_factory=lambda: [0.05, 0.1, 0.2])
    revuz_time: float = Field(default=0.2, ge=0)
    n_test_functions: int = Field(default=5, ge=1)
    dynkin_starts: int = Field(default=5, ge=1)


class ChecksSpec(_Strict):
    n_samples: int = Field(default=100_000, ge=1)
    box_radius: float = Field(default=10.0, gt=0)


class RunConfig(_Strict):
    """Top-level run file."""

    seed: int = Field(default=0, ge=0)
    out: str = "out"
    domain: dict[str, Any]
    measure: list[dict[str, Any]] = Field(default_factory=list)
    nonlinearity: NonlinearitySpec = Field(default_factory=NonlinearitySpec)
    paths: PathsSpec = Field(default_factory=PathsSpec)
    solver: SolverSpec = Field(default_factory=SolverSpec)
    verification: VerificationSpec = Field(default_factory=VerificationSpec)
    checks: ChecksSpec = Field(default_factory=ChecksSpec)

    @field_validator("seed")
    @classmethod
    def _seed_fits(cls, value: int) -> int:
        if value >= 2**64:
            raise ValueError("seed must fit in 64 bits")
        return value


def _validate(schema: type[BaseModel], data: dict, where: str) -> BaseModel:
    try:
        return schema.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        location = ".".join(str(part) for part in (where, *first["loc"]) if part != "")
        raise ConfigError(f"{location}: {first['msg']}") from exc


def _lookup(name: Any, catalog: tuple[str, ...], what: str, where: str) -> str:
    if not isinstance(name, str):
        raise ConfigError(f"{where}: {what} must be a string, got {name!r}")
    if name in catalog:
        return name
    message = f"{where}: unknown {what} {name!r}"
    suggestion = suggest_name(name, catalog)
    if suggestion is not None:
        message += f"; did you mean {suggestion!r}?"
    raise ConfigError(message + f" (known: {', '.join(catalog)})")


def _vector(values: list[float], dimension: int, where: str) -> tuple[float, ...]:
    if len(values) != dimension:
        raise ConfigError(f"{where}: expected {dimension} coordinates, got {len(values)}")
    return tuple(float(v) for v in values)


def _build_shape(table: dict, where: str):
    if not isinstance(table, dict):
        raise ConfigError(f"{where}: expected a table")
    shape = _lookup(table.get("shape"), DOMAIN_SHAPES, "domain shape", f"{where}.shape")
    spec = _validate(DOMAIN_SCHEMAS[shape], table, where)
    try:
        if shape == "ball":
            return Ball(tuple(spec.center), spec.radius)
        if shape == "box":
            return Box(tuple(spec.lo), tuple(spec.hi))
        if shape == "annulus":
            return Annulus(tuple(spec.center), spec.r_in, spec.r_out)
        if shape == "intersection":
            return Intersection(tuple(_build_shape(c, f"{where}.children.{i}") for i, c in enumerate(spec.children)))
        return Difference(_build_shape(spec.minuend, f"{where}.minuend"), _build_shape(spec.subtrahend, f"{where}.subtrahend"))
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def build_domain(table: dict, where: str = "domain") -> Domain:
    shape = _build_shape(table, where)
    try:
        return Domain(shape)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _parse(text: str, allowed: set[str], where: str):
    try:
        expr = parse_expression(text)
        expr.check_names(allowed)
    except ExpressionError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    return expr


def build_measures(tables: list[dict], n_components: int, dimension: int) -> tuple[DiffuseMeasure, ...]:
    """Group ``[[measure]]`` tables by component into Jordan-form measures."""
    coordinates = {f"x{i + 1}" for i in range(dimension)} | {"r"}
    terms: list[list[MeasureTerm]] = [[] for _ in range(n_components)]
    for number, table in enumerate(tables):
        where = f"measure.{number}"
        if not isinstance(table, dict):
            raise ConfigError(f"{where}: expected a table")
        kind = _lookup(table.get("kind"), MEASURE_KINDS, "measure kind", f"{where}.kind")
        spec = _validate(MEASURE_SCHEMAS[kind], table, where)
        if spec.sign not in (1, -1):
            raise ConfigError(f"{where}.sign: must be +1 or -1, got {spec.sign}")
        if spec.component > n_components:
            raise ConfigError(f"{where}.component: {spec.component} exceeds n_components = {n_components}")
        if kind == "density":
            term_kind = Density(_parse(spec.expr, coordinates, f"{where}.expr"))
        elif kind == "sphere_surface":
            term_kind = SphereSurface(
                _vector(spec.center, dimension, f"{where}.center"), spec.radius, spec.mass, spec.mollification
            )
        else:
            if spec.axis > dimension:
                raise ConfigError(f"{where}.axis: {spec.axis} exceeds the dimension {dimension}")
            term_kind = BoxFaceSurface(
                spec.axis - 1,
                spec.level,
                _vector(spec.lo, dimension, f"{where}.lo"),
                _vector(spec.hi, dimension, f"{where}.hi"),
                spec.mass,
                spec.mollification,
            )
        terms[spec.component - 1].append(MeasureTerm(spec.sign, term_kind))
    return tuple(DiffuseMeasure(tuple(t)) for t in terms)


def build_nonlinearity(spec: NonlinearitySpec, dimension: int) -> Nonlinearity:
    kind_name = _lookup(spec.kind, NONLINEARITY_KINDS, "nonlinearity kind", "nonlinearity.kind")
    for number, condition in enumerate(spec.declared):
        _lookup(condition, CONDITIONS, "condition", f"nonlinearity.declared.{number}")
    n = spec.n_components
    if kind_name in ("componentwise", "expression"):
        if not spec.exprs:
            raise ConfigError(f"nonlinearity.exprs: kind {kind_name!r} needs one expression per component")
        n = n or len(spec.exprs)
    elif kind_name == "rotation":
        n = n or 2
    n = n or 1
    coordinates = {f"x{i + 1}" for i in range(dimension)} | {"r"}
    if kind_name == "zero":
        kind = Zero()
    elif kind_name == "linear_decay":
        if spec.alpha is None:
            raise ConfigError("nonlinearity.alpha: linear_decay needs alpha")
        kind = LinearDecay(spec.alpha)
    elif kind_name == "rotation":
        kind = Rotation()
    elif kind_name == "cubic_decay":
        kind = CubicDecay()
    elif kind_name == "componentwise":
        kind = Componentwise(
            tuple(_parse(t, coordinates | {"y"}, f"nonlinearity.exprs.{i}") for i, t in enumerate(spec.exprs))
        )
    else:
        unknowns = {f"y{k + 1}" for k in range(n)}
        kind = ExpressionVector(
            tuple(_parse(t, coordinates | unknowns, f"nonlinearity.exprs.{i}") for i, t in enumerate(spec.exprs))
        )
    try:
        return Nonlinearity(n, kind, frozenset(spec.declared), spec.alpha)
    except ValueError as exc:
        raise ConfigError(f"nonlinearity: {exc}") from exc


@dataclass(frozen=True)
class LoadedRun:
    config: RunConfig
    problem: Problem
    path_config: PathConfig
    solver_config: SolverConfig
    source: Optional[Path] = None

    @property
    def domain(self) -> Domain:
        return self.problem.domain

    @property
    def enabled_verifications(self) -> list[str]:
        return [name for name in VERIFICATIONS if getattr(self.config.verification, name)]

    @property
    def start(self) -> np.ndarray:
        """Start point for single-point verifications: configured, else the bounding-box center."""
        if self.config.verification.start is not None:
            return np.array(_vector(self.config.verification.start, self.domain.dimension, "verification.start"))
        lo, hi = self.domain.bounding_box
        center = 0.5 * (lo + hi)
        if self.domain.contains(center):
            return center
        return self.domain.sample_interior(1, np.random.default_rng(self.config.seed))[0]


def parse_run(data: dict, seed: Optional[int] = None, threads: int = 1, progress: bool = False, source=None) -> LoadedRun:
    """Validate a decoded run table and build the solver objects.

    Inputs:
        data: Table decoded from TOML.
        seed: Overrides the file's seed when given.
        threads: Worker count for node batches.
        progress: Show a progress bar per Picard sweep.
        source: File the table came from, for messages.
    Returns:
        LoadedRun.
    """
    config = _validate(RunConfig, data, "")
    if seed is not None:
        config = config.model_copy(update={"seed": seed})
    domain = build_domain(config.domain)
    nonlinearity = build_nonlinearity(config.nonlinearity, domain.dimension)
    measures = build_measures(config.measure, nonlinearity.n_components, domain.dimension)
    try:
        problem = Problem(domain, measures, nonlinearity)
        path_config = PathConfig(
            config.paths.step, config.paths.max_steps, config.paths.exit_tolerance_factor, config.seed
        )
        solver_config = SolverConfig(
            grid_resolution=config.solver.grid_resolution,
            paths_per_node=config.solver.paths_per_node,
            max_sweeps=config.solver.max_sweeps,
            tol=config.solver.tol,
            damping=config.solver.damping,
            truncation_base=config.solver.truncation_base,
            n_jobs=threads,
            progress=progress,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return LoadedRun(config, problem, path_config, solver_config, Path(source) if source else None)


def load_run(path: str | Path, **kwargs) -> LoadedRun:
    """Read and validate the TOML run file at ``path``; see ``parse_run`` for options."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        with path.open("rb") as handle:
            data = tomllib.load(handle)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_run(data, source=path, **kwargs)
