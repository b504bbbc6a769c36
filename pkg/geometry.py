"""Bounded open domains described by signed-distance shapes.

Signed distances are positive inside the domain and non-positive outside,
the opposite of the usual graphics convention. Every function accepts either a
single point of shape ``(d,)`` or a batch of shape ``(m, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

__all__ = [
    "Annulus",
    "Ball",
    "Box",
    "Difference",
    "DimensionMismatchError",
    "Domain",
    "Intersection",
    "OutsideDomainError",
    "Shape",
    "ball",
]


class DimensionMismatchError(ValueError):
    """A point's dimension differs from the domain's."""


class OutsideDomainError(ValueError):
    """A point required to lie in the domain lies outside it."""


def _as_points(x, dimension: int) -> tuple[np.ndarray, bool]:
    """Coerce ``x`` to a float array of shape ``(m, d)``.

    Inputs:
        x: A single point or a batch of points.
        dimension: Expected spatial dimension d.
    Returns:
        Tuple of (points array, whether the input was a single point).
    """
    points = np.asarray(x, dtype=float)
    single = points.ndim == 1
    if single:
        points = points[None, :]
    if points.ndim != 2 or points.shape[1] != dimension:
        raise DimensionMismatchError(
            f"expected points of dimension {dimension}, got array of shape {np.shape(x)}"
        )
    return points, single


@dataclass(frozen=True)
class Ball:
    center: tuple[float, ...]
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"ball radius must be positive, got {self.radius}")

    @property
    def dimension(self) -> int:
        return len(self.center)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return self.radius - np.linalg.norm(points - np.asarray(self.center), axis=-1)

    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.center) + self.radius)

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center, dtype=float)
        return c - self.radius, c + self.radius


@dataclass(frozen=True)
class Box:
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        if len(self.lo) != len(self.hi):
            raise DimensionMismatchError("box corners have different dimensions")
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"box needs lo < hi on every axis, got {self.lo} / {self.hi}")

    @property
    def dimension(self) -> int:
        return len(self.lo)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        q = np.maximum(lo - points, points - hi)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return -(outside + inside)

    def bounding_radius(self) -> float:
        corner = np.maximum(np.abs(self.lo), np.abs(self.hi))
        return float(np.linalg.norm(corner))

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.lo, dtype=float), np.asarray(self.hi, dtype=float)


@dataclass(frozen=True)
class Annulus:
    center: tuple[float, ...]
    r_in: float
    r_out: float

    def __post_init__(self):
        if not 0 <= self.r_in < self.r_out:
            raise ValueError(f"annulus needs 0 <= r_in < r_out, got {self.r_in}, {self.r_out}")

    @property
    def dimension(self) -> int:
        return len(self.center)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        rho = np.linalg.norm(points - np.asarray(self.center), axis=-1)
        return np.minimum(self.r_out - rho, rho - self.r_in)

    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.center) + self.r_out)

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center, dtype=float)
        return c - self.r_out, c + self.r_out


@dataclass(frozen=True)
class Intersection:
    children: tuple["Shape", ...]

    def __post_init__(self):
        if not self.children:
            raise ValueError("intersection needs at least one child shape")
        dims = {child.dimension for child in self.children}
        if len(dims) != 1:
            raise DimensionMismatchError(f"intersection children disagree on dimension: {sorted(dims)}")

    @property
    def dimension(self) -> int:
        return self.children[0].dimension

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        # min of child distances never overestimates the true inside distance
        return np.min([child.signed_distance(points) for child in self.children], axis=0)

    def bounding_radius(self) -> float:
        return min(child.bounding_radius() for child in self.children)

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        boxes = [child.bounding_box() for child in self.children]
        lo = np.max([b[0] for b in boxes], axis=0)
        hi = np.min([b[1] for b in boxes], axis=0)
        return lo, hi


@dataclass(frozen=True)
class Difference:
    minuend: "Shape"
    subtrahend: "Shape"

    def __post_init__(self):
        if self.minuend.dimension != self.subtrahend.dimension:
            raise DimensionMismatchError("difference operands disagree on dimension")

    @property
    def dimension(self) -> int:
        return self.minuend.dimension

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return np.minimum(self.minuend.signed_distance(points), -self.subtrahend.signed_distance(points))

    def bounding_radius(self) -> float:
        return self.minuend.bounding_radius()

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.minuend.bounding_box()


Shape = Union[Ball, Box, Annulus, Intersection, Difference]


@dataclass(frozen=True)
class Domain:
    """A bounded open set in R^d, d >= 2, given by a signed-distance shape.

    Domains are immutable and can be shared freely between path workers.
    """

    shape: Shape
    dimension: int = field(default=0)

    def __post_init__(self):
        if self.dimension == 0:
            object.__setattr__(self, "dimension", self.shape.dimension)
        if self.dimension != self.shape.dimension:
            raise DimensionMismatchError(
                f"domain dimension {self.dimension} differs from shape dimension {self.shape.dimension}"
            )
        if self.dimension < 2:
            raise ValueError(f"domains need dimension d >= 2, got {self.dimension}")
        radius = self.shape.bounding_radius()
        if not np.isfinite(radius) or radius <= 0:
            raise ValueError(f"domain has no finite positive bounding radius ({radius})")
        lo, hi = self.shape.bounding_box()
        if np.any(hi <= lo):
            raise ValueError("domain is empty: its bounding box has no volume")

    @property
    def bounding_radius(self) -> float:
        """Radius R with the domain contained in B(0, R)."""
        return self.shape.bounding_radius()

    @property
    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.shape.bounding_box()

    def signed_distance(self, x):
        """Signed distance to the boundary, positive inside.

        For intersections and differences the value is a lower bound on the
        true distance inside the domain.
        """
        points, single = _as_points(x, self.dimension)
        sd = self.shape.signed_distance(points)
        return float(sd[0]) if single else sd

    def contains(self, x):
        """True for points strictly inside (signed distance > 0)."""
        points, single = _as_points(x, self.dimension)
        inside = self.shape.signed_distance(points) > 0
        return bool(inside[0]) if single else inside

    def exit_time_bound(self, x):
        """Return (R^2 - |x|^2)/d, the mean exit time of B(0, R) from x.

        Inputs:
            x: Point (or batch) in the closure of the domain.
        Returns:
            Upper bound for the mean lifetime of Brownian motion killed on leaving the domain.
        """
        points, single = _as_points(x, self.dimension)
        if np.any(self.shape.signed_distance(points) < 0):
            raise OutsideDomainError("exit_time_bound needs points in the closure of the domain")
        bound = (self.bounding_radius**2 - np.sum(points**2, axis=-1)) / self.dimension
        bound = np.maximum(bound, 0.0)
        return float(bound[0]) if single else bound

    def max_exit_time_bound(self) -> float:
        """Largest value of the exit-time bound over B(0, R), reached at the origin."""
        return self.bounding_radius**2 / self.dimension

    def sample_interior(self, n: int, rng: np.random.Generator, batch: int = 4096) -> np.ndarray:
        """Draw ``n`` points uniformly from the domain by rejection from its bounding box."""
        lo, hi = self.bounding_box
        accepted: list[np.ndarray] = []
        count = 0
        attempts = 0
        while count < n:
            candidates = rng.uniform(lo, hi, size=(max(batch, n - count), self.dimension))
            keep = candidates[self.shape.signed_distance(candidates) > 0]
            accepted.append(keep)
            count += len(keep)
            attempts += 1
            if attempts > 10_000 and count == 0:
                raise RuntimeError("could not sample any interior point; is the domain empty?")
        return np.concatenate(accepted)[:n]

    def box_volume(self) -> float:
        lo, hi = self.bounding_box
        return float(np.prod(hi - lo))


def ball(center: Sequence[float], radius: float) -> Domain:
    """Shorthand for a ball domain."""
    return Domain(Ball(tuple(float(c) for c in center), float(radius)))
