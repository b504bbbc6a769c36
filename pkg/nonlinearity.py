"""Right-hand sides f: Omega x R^n -> R^n, the truncation T_r, and a sampling
falsifier for the structural conditions the solver relies on.

Condition names:
    A4                      <f(x, y), y> <= 0                      (angle condition)
    A5                      <f(x, y), y> <= -alpha |y|^2           (uniform angle condition)
    A4prime                 <f(x, y) - f(x, y'), y - y'> <= 0      (monotonicity)
    A4doubleprime           f^k(x, y) y_k <= 0 for every k          (coordinatewise sign)
    monotone_componentwise  f^k non-increasing in y_k, f^k = 0 where y_k = 0
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from expressions import Expression, parse_expression
from geometry import Domain

logger = logging.getLogger(__name__)

__all__ = [
    "CONDITIONS",
    "Componentwise",
    "ConditionReport",
    "ConditionSamples",
    "CubicDecay",
    "ExpressionVector",
    "LinearDecay",
    "Nonlinearity",
    "NonlinearityEvaluationError",
    "Rotation",
    "Violation",
    "Zero",
    "check_condition",
    "check_declared",
    "condition_values",
    "draw_samples",
    "evaluate",
    "finite_sweep",
    "truncate",
]

CONDITIONS = ("A4", "A5", "A4prime", "A4doubleprime", "monotone_componentwise")
RELATIVE_TOLERANCE = 1e-12


class NonlinearityEvaluationError(ValueError):
    """f produced a non-finite value."""


@dataclass(frozen=True)
class Zero:
    pass


@dataclass(frozen=True)
class LinearDecay:
    alpha: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"linear decay needs alpha > 0, got {self.alpha}")


@dataclass(frozen=True)
class Rotation:
    pass


@dataclass(frozen=True)
class CubicDecay:
    pass


@dataclass(frozen=True)
class Componentwise:
    """f^k(x, y) = g_k(x, y_k); each expression sees its own coordinate as ``y``."""

    exprs: tuple[Expression, ...]

    @classmethod
    def from_texts(cls, texts) -> "Componentwise":
        return cls(tuple(parse_expression(t) for t in texts))


@dataclass(frozen=True)
class ExpressionVector:
    """f^k given by expressions in x1..xd, r and y1..yn."""

    exprs: tuple[Expression, ...]

    @classmethod
    def from_texts(cls, texts) -> "ExpressionVector":
        return cls(tuple(parse_expression(t) for t in texts))


Kind = Union[Zero, LinearDecay, Rotation, CubicDecay, Componentwise, ExpressionVector]


def truncate(y, r: float) -> np.ndarray:
    """Radial projection T_r(y) = r y / max(|y|, r) onto the closed ball of radius r.

    Inputs:
        y: Vector (n,) or batch (m, n).
        r: Positive radius.
    Returns:
        Array of the same shape as ``y``.
    """
    if not r > 0:
        raise ValueError(f"truncation radius must be positive, got {r}")
    y = np.asarray(y, dtype=float)
    norms = np.linalg.norm(y, axis=-1, keepdims=True)
    return y * (r / np.maximum(norms, r))


@dataclass(frozen=True)
class Nonlinearity:
    n_components: int
    kind: Kind = field(default_factory=Zero)
    declared_conditions: frozenset = frozenset()
    alpha: Optional[float] = None
    level: Optional[float] = None

    def __post_init__(self):
        if self.n_components < 1:
            raise ValueError(f"n_components must be >= 1, got {self.n_components}")
        if isinstance(self.kind, Rotation) and self.n_components != 2:
            raise ValueError("the rotation nonlinearity is defined for n = 2 only")
        if isinstance(self.kind, (Componentwise, ExpressionVector)) and len(self.kind.exprs) != self.n_components:
            raise ValueError(
                f"{type(self.kind).__name__} needs {self.n_components} expressions, got {len(self.kind.exprs)}"
            )
        unknown = set(self.declared_conditions) - set(CONDITIONS)
        if unknown:
            raise ValueError(f"unknown condition(s) {sorted(unknown)}; known: {list(CONDITIONS)}")
        if self.alpha is None and isinstance(self.kind, LinearDecay):
            object.__setattr__(self, "alpha", self.kind.alpha)
        if "A5" in self.declared_conditions and self.alpha is None:
            raise ValueError("declaring A5 needs alpha")
        object.__setattr__(self, "declared_conditions", frozenset(self.declared_conditions))

    @property
    def is_zero(self) -> bool:
        return isinstance(self.kind, Zero)

    def declares(self, condition: str, explicit: bool = False) -> bool:
        """Declared conditions, closed under the implications A5 => A4 and A4'' => A4.

        The zero map satisfies every condition; with ``explicit`` it only
        declares what its declared set (and the implications) name.
        """
        declared = set(self.declared_conditions)
        if self.is_zero and not explicit:
            return True
        if declared & {"A5", "A4doubleprime", "monotone_componentwise"}:
            declared.add("A4")
        if "monotone_componentwise" in declared:
            declared.add("A4doubleprime")
        return condition in declared

    def truncated(self, level: Optional[float]) -> "Nonlinearity":
        """T_level(f); ``None`` removes the truncation."""
        return replace(self, level=level)

    def raw(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        kind = self.kind
        if isinstance(kind, Zero):
            return np.zeros_like(y)
        if isinstance(kind, LinearDecay):
            return -kind.alpha * y
        if isinstance(kind, Rotation):
            return np.column_stack([-y[:, 1], y[:, 0]])
        if isinstance(kind, CubicDecay):
            return -y * np.sum(y**2, axis=1, keepdims=True)
        if isinstance(kind, Componentwise):
            return np.column_stack([expr(x, own=y[:, k]) for k, expr in enumerate(kind.exprs)])
        return np.column_stack([expr(x, y) for expr in kind.exprs])

    def __call__(self, x, y) -> np.ndarray:
        """f(x, y) on batches x (m, d), y (m, n); truncated when ``level`` is set."""
        values = self.raw(x, y)
        if self.level is not None:
            values = truncate(values, self.level)
        return values


def evaluate(f: Nonlinearity, x, y) -> np.ndarray:
    """Evaluate ``f`` at a point or batch.

    Inputs:
        f: Nonlinearity.
        x: Point (d,) or batch (m, d).
        y: Value (n,) or batch (m, n); a scalar is accepted for n = 1.
    Returns:
        Array shaped like ``y``.
    """
    y_arr = np.asarray(y, dtype=float)
    single = y_arr.ndim <= 1
    ys = np.atleast_2d(y_arr.reshape(-1) if single else y_arr)
    if ys.shape[1] != f.n_components:
        raise ValueError(f"expected {f.n_components} components, got {ys.shape[1]}")
    xs = np.atleast_2d(np.asarray(x, dtype=float))
    if len(xs) == 1 and len(ys) > 1:
        xs = np.repeat(xs, len(ys), axis=0)
    values = f(xs, ys)
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(values), axis=1))[0])
        raise NonlinearityEvaluationError(f"f is not finite at x={xs[bad]}, y={ys[bad]}")
    if single:
        return values[0].reshape(y_arr.shape) if y_arr.ndim else values[0, 0]
    return values


@dataclass(frozen=True)
class Violation:
    x: np.ndarray
    y: np.ndarray
    value: float


@dataclass(frozen=True)
class ConditionReport:
    condition: str
    holds_on_sample: bool
    worst_violation: Violation
    tolerance: float
    n_samples: int

    def to_line(self) -> str:
        verdict = "holds" if self.holds_on_sample else "VIOLATED"
        w = self.worst_violation
        return (
            f"{self.condition}: {verdict} on {self.n_samples} samples; worst value {w.value:.6g} "
            f"at x={np.array2string(w.x, precision=4)}, y={np.array2string(w.y, precision=4)}"
        )


@dataclass(frozen=True)
class ConditionSamples:
    """One draw of (x, y) pairs shared by every condition check."""

    xs: np.ndarray
    ys: np.ndarray
    others: np.ndarray
    steps: np.ndarray

    @property
    def n_samples(self) -> int:
        return len(self.xs)


def draw_samples(
    n_components: int, domain: Domain, n_samples: int = 100_000, box_radius: float = 10.0, seed: int = 0
) -> ConditionSamples:
    """x uniform in the domain, y and the A4prime partners uniform in [-box_radius, box_radius]^n."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    rng = np.random.default_rng([seed, 0xC0])
    xs = domain.sample_interior(n_samples, rng)
    ys = rng.uniform(-box_radius, box_radius, size=(n_samples, n_components))
    others = rng.uniform(-box_radius, box_radius, size=(n_samples, n_components))
    steps = rng.uniform(0.0, box_radius, size=n_samples)
    return ConditionSamples(xs, ys, others, steps)


def condition_values(
    f: Nonlinearity, condition: str, samples: ConditionSamples, alpha: Optional[float] = None
) -> tuple[np.ndarray, float]:
    """Violation statistic per sample and the tolerance it is compared with.

    A sample satisfies ``condition`` when its value is at most the tolerance.
    The tolerance is 1e-12 times the sample's magnitude of <f, y>;
    coordinatewise checks use tol / n per coordinate.
    """
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}; known: {list(CONDITIONS)}")
    xs, ys = samples.xs, samples.ys
    n = f.n_components
    with np.errstate(all="ignore"):
        fy = f(xs, ys)
    scale = max(1.0, float(np.nanmax(np.abs(fy) * np.abs(ys))) * n)
    tol = RELATIVE_TOLERANCE * scale

    if condition == "A4":
        values = np.sum(fy * ys, axis=1)
    elif condition == "A5":
        a = alpha if alpha is not None else f.alpha
        if a is None:
            raise ValueError("checking A5 needs alpha")
        values = np.sum(fy * ys, axis=1) + a * np.sum(ys**2, axis=1)
    elif condition == "A4prime":
        with np.errstate(all="ignore"):
            f_others = f(xs, samples.others)
        values = np.sum((fy - f_others) * (ys - samples.others), axis=1)
    elif condition == "A4doubleprime":
        tol = tol / n
        values = (fy * ys).max(axis=1)
    else:
        tol = tol / n
        values = np.full(len(xs), -np.inf)
        for k in range(n):
            shifted = ys.copy()
            shifted[:, k] += samples.steps
            zeroed = ys.copy()
            zeroed[:, k] = 0.0
            with np.errstate(all="ignore"):
                increase = f(xs, shifted)[:, k] - fy[:, k]
                at_zero = np.abs(f(xs, zeroed)[:, k])
            values = np.maximum(values, np.maximum(increase, at_zero))
    return np.where(np.isfinite(values), values, np.inf), tol


def check_condition(
    f: Nonlinearity,
    condition: str,
    domain: Domain,
    n_samples: int = 100_000,
    box_radius: float = 10.0,
    seed: int = 0,
    alpha: Optional[float] = None,
    samples: Optional[ConditionSamples] = None,
) -> ConditionReport:
    """Look for counterexamples to ``condition`` on random samples.

    The samples depend on ``seed`` only, so every condition checked with the
    same seed sees the same (x, y) pairs; pass ``samples`` to reuse a draw.

    Returns:
        ConditionReport with the sample maximising the violation statistic.
    """
    if samples is None:
        samples = draw_samples(f.n_components, domain, n_samples, box_radius, seed)
    values, tol = condition_values(f, condition, samples, alpha)
    at = samples.ys
    if condition == "A4prime":
        at = np.concatenate([samples.ys, samples.others], axis=1)
    worst = int(np.argmax(values))
    holds = bool(values[worst] <= tol)
    report = ConditionReport(
        condition, holds, Violation(samples.xs[worst], at[worst], float(values[worst])), tol, samples.n_samples
    )
    if condition in f.declared_conditions and not holds:
        logger.warning("declared condition %s is violated: %s", condition, report.to_line())
    return report


def check_declared(f: Nonlinearity, domain: Domain, n_samples: int = 100_000, box_radius: float = 10.0, seed: int = 0):
    """Reports for every declared condition, in catalog order, all on one draw of samples."""
    declared = [c for c in CONDITIONS if c in f.declared_conditions]
    if not declared:
        return []
    samples = draw_samples(f.n_components, domain, n_samples, box_radius, seed)
    return [check_condition(f, c, domain, seed=seed, samples=samples) for c in declared]


def finite_sweep(f: Nonlinearity, domain: Domain, n_samples: int = 10_000, box_radius: float = 10.0, seed: int = 0) -> None:
    """Evaluate ``f`` on random (x, y) samples and raise if any value is non-finite."""
    rng = np.random.default_rng([seed, 0xF1])
    xs = domain.sample_interior(n_samples, rng)
    ys = rng.uniform(-box_radius, box_radius, size=(n_samples, f.n_components))
    evaluate(f, xs, ys)
