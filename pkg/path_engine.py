"""Discretised Brownian motion killed on leaving a domain.

Paths follow the Euler scheme X_{j+1} = X_j + sqrt(h) * N(0, I) and are killed
at the first step j >= 1 whose signed distance drops to the exit tolerance
delta = k_cut * sqrt(h). Every path draws its increments from its own Philox
stream keyed by (base_seed, path_index), in chunks of ``CHUNK_STEPS`` steps,
so a path is the same whether it is simulated alone or inside any batch.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from sklearn.utils import gen_even_slices

from geometry import Domain, OutsideDomainError

os.environ.setdefault("JOBLIB_MULTIPROCESSING", "0")

logger = logging.getLogger(__name__)

__all__ = [
    "BatchWalk",
    "CHUNK_STEPS",
    "ExitTimeEstimate",
    "KilledPath",
    "PathConfig",
    "boundary_decay",
    "mean_exit_time",
    "occupation_integral",
    "occupation_partials",
    "path_generator",
    "simulate_killed_path",
    "subdomain_exit",
    "walk_batch",
    "walk_parallel",
]

CHUNK_STEPS = 128
# Boundary shift that removes the leading sqrt(h) bias of discretely monitored exits.
DEFAULT_EXIT_TOLERANCE_FACTOR = 0.5826

# reasons a path stopped
KILLED = 1
LEFT_SUBDOMAIN = 2
TRUNCATED = 3

Integrand = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class PathConfig:
    step: float = 1e-3
    max_steps: int = 20_000
    exit_tolerance_factor: float = DEFAULT_EXIT_TOLERANCE_FACTOR
    base_seed: int = 0

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError(f"step must be positive, got {self.step}")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be at least 1, got {self.max_steps}")
        if self.exit_tolerance_factor < 0:
            raise ValueError(f"exit_tolerance_factor must be >= 0, got {self.exit_tolerance_factor}")
        if not 0 <= self.base_seed < 2**64:
            raise ValueError(f"base_seed must fit in 64 bits, got {self.base_seed}")

    @property
    def exit_tolerance(self) -> float:
        """Killing threshold delta on the signed distance."""
        return self.exit_tolerance_factor * float(np.sqrt(self.step))

    @property
    def horizon(self) -> float:
        return self.max_steps * self.step

    def check_horizon(self, domain: Domain) -> None:
        """Require max_steps * h >= 10 * the largest exit-time bound of ``domain``."""
        needed = 10.0 * domain.max_exit_time_bound()
        if self.horizon < needed:
            raise ValueError(
                f"max_steps * step = {self.horizon:g} is below 10 x the mean exit-time bound ({needed:g}); "
                "raise max_steps"
            )

    def with_seed(self, base_seed: int) -> "PathConfig":
        return PathConfig(self.step, self.max_steps, self.exit_tolerance_factor, base_seed)


def path_generator(base_seed: int, path_index: int) -> np.random.Generator:
    """Counter-based generator owned by one path."""
    key = np.array([base_seed, path_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class KilledPath:
    """One recorded trajectory; positions run from X_0 up to the stopping step."""

    positions: np.ndarray
    step: float
    lifetime_index: int
    exit_point: np.ndarray
    truncated: bool
    path_index: int = 0

    @property
    def lifetime(self) -> float:
        return self.lifetime_index * self.step

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.positions)) * self.step

    @property
    def interior_positions(self) -> np.ndarray:
        """Positions at which integrands may be evaluated."""
        if self.truncated:
            return self.positions
        return self.positions[: self.lifetime_index]

    @property
    def last_interior(self) -> np.ndarray:
        return self.interior_positions[-1]


def _exit_points(prev: np.ndarray, new: np.ndarray, sd_prev: np.ndarray, sd_new: np.ndarray) -> np.ndarray:
    """Project the killing step onto the boundary by linear interpolation in signed distance."""
    gap = np.maximum(sd_prev - sd_new, np.finfo(float).tiny)
    frac = np.clip(sd_prev / gap, 0.0, 2.0)
    return prev + frac[:, None] * (new - prev)


def simulate_killed_path(domain: Domain, start, cfg: PathConfig, path_index: int) -> KilledPath:
    """Simulate one killed path and keep every position.

    Inputs:
        domain: Domain the path is killed on leaving.
        start: Starting point inside the domain.
        cfg: Step size, horizon, exit tolerance and base seed.
        path_index: Index selecting the path's random stream.
    Returns:
        KilledPath; ``truncated`` is set when max_steps was reached before exit.
    """
    start = np.asarray(start, dtype=float)
    if not domain.contains(start):
        raise OutsideDomainError(f"path start {start} is not inside the domain")

    gen = path_generator(cfg.base_seed, path_index)
    sqrt_h = np.sqrt(cfg.step)
    delta = cfg.exit_tolerance
    chunks = [start[None, :]]
    pos = start
    done = 0
    while done < cfg.max_steps:
        increments = gen.standard_normal((CHUNK_STEPS, domain.dimension)) * sqrt_h
        take = min(CHUNK_STEPS, cfg.max_steps - done)
        block = np.cumsum(np.vstack([pos[None, :], increments[:take]]), axis=0)[1:]
        sd = domain.signed_distance(block)
        hits = np.flatnonzero(sd <= delta)
        if hits.size:
            first = hits[0]
            chunks.append(block[: first + 1])
            positions = np.concatenate(chunks)
            lifetime_index = done + first + 1
            prev = positions[lifetime_index - 1]
            exit_point = _exit_points(
                prev[None, :],
                positions[lifetime_index][None, :],
                np.atleast_1d(domain.signed_distance(prev[None, :])),
                np.atleast_1d(sd[first]),
            )[0]
            return KilledPath(positions, cfg.step, lifetime_index, exit_point, False, path_index)
        chunks.append(block)
        pos = block[-1]
        done += take

    positions = np.concatenate(chunks)
    return KilledPath(positions, cfg.step, cfg.max_steps, positions[-1].copy(), True, path_index)


def _as_columns(values: np.ndarray, n_rows: int) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.ndim == 0:
        values = np.full(n_rows, float(values))
    return values.reshape(n_rows, -1)


def occupation_partials(path: KilledPath, integrand: Integrand) -> np.ndarray:
    """Cumulative trapezoidal integrals of ``integrand`` along ``path``.

    The integrand is only evaluated at interior positions; at the killing step
    its value is replaced by the one at the last interior position, so that
    integrating 1 gives exactly ``lifetime_index * step``.

    Returns:
        Array of shape (lifetime_index + 1, k), entry j holding the integral up to t_j.
    """
    interior = path.interior_positions
    g = _as_columns(integrand(interior), len(interior))
    h = path.step
    increments = 0.5 * h * (g[:-1] + g[1:])
    if not path.truncated:
        increments = np.vstack([increments, h * g[-1:]])
    partials = np.cumsum(np.vstack([np.zeros((1, g.shape[1])), increments]), axis=0)
    return partials


def occupation_integral(path: KilledPath, integrand: Integrand):
    """Trapezoidal approximation of the integral of ``integrand(X_t)`` over [0, zeta]."""
    total = occupation_partials(path, integrand)[-1]
    return float(total[0]) if total.shape[0] == 1 else total


def subdomain_exit(path: KilledPath, g_domain: Domain) -> int:
    """Index of the first recorded position outside ``g_domain``, capped at the lifetime index."""
    recorded = path.positions[: path.lifetime_index + 1]
    outside = np.flatnonzero(~g_domain.contains(recorded))
    if outside.size == 0:
        return path.lifetime_index
    return int(min(outside[0], path.lifetime_index))


@dataclass
class BatchWalk:
    """Per-path summaries of a batch of killed paths.

    ``final_positions`` holds the boundary crossing estimate for killed paths,
    the first position outside the stopping sub-domain for paths that left it,
    and the last position for truncated paths.
    """

    step: float
    integrals: np.ndarray
    stop_index: np.ndarray
    reason: np.ndarray
    final_positions: np.ndarray
    last_interior: np.ndarray
    checkpoint_indices: tuple[int, ...]
    checkpoint_positions: np.ndarray
    checkpoint_integrals: np.ndarray
    checkpoint_running: np.ndarray

    @property
    def n_paths(self) -> int:
        return len(self.stop_index)

    @property
    def stop_times(self) -> np.ndarray:
        return self.stop_index * self.step

    @property
    def killed(self) -> np.ndarray:
        return self.reason == KILLED

    @property
    def left_subdomain(self) -> np.ndarray:
        return self.reason == LEFT_SUBDOMAIN

    @property
    def truncated(self) -> np.ndarray:
        return self.reason == TRUNCATED

    @property
    def truncated_fraction(self) -> float:
        return float(np.mean(self.truncated)) if self.n_paths else 0.0

    @classmethod
    def concatenate(cls, parts: Sequence["BatchWalk"]) -> "BatchWalk":
        first = parts[0]
        return cls(
            step=first.step,
            integrals=np.concatenate([p.integrals for p in parts]),
            stop_index=np.concatenate([p.stop_index for p in parts]),
            reason=np.concatenate([p.reason for p in parts]),
            final_positions=np.concatenate([p.final_positions for p in parts]),
            last_interior=np.concatenate([p.last_interior for p in parts]),
            checkpoint_indices=first.checkpoint_indices,
            checkpoint_positions=np.concatenate([p.checkpoint_positions for p in parts]),
            checkpoint_integrals=np.concatenate([p.checkpoint_integrals for p in parts]),
            checkpoint_running=np.concatenate([p.checkpoint_running for p in parts]),
        )


def walk_batch(
    domain: Domain,
    starts,
    cfg: PathConfig,
    path_indices,
    integrand: Optional[Integrand] = None,
    n_outputs: int = 1,
    stop_domain: Optional[Domain] = None,
    checkpoints: Sequence[int] = (),
) -> BatchWalk:
    """Simulate a batch of killed paths in lock-step without storing trajectories.

    Inputs:
        domain: Domain the paths are killed on leaving.
        starts: Array (m, d) of starting points inside ``domain``.
        cfg: Path configuration.
        path_indices: m stream indices, one per path.
        integrand: Optional map (p, d) -> (p, n_outputs) integrated along each path.
        n_outputs: Number of integrand columns.
        stop_domain: Optional sub-domain; paths also stop at their first position outside it.
        checkpoints: Step indices at which the running state is recorded.
    Returns:
        BatchWalk with stopped integrals (same endpoint rule as ``occupation_partials``).
    """
    starts = np.array(starts, dtype=float, ndmin=2)
    m, d = starts.shape
    path_indices = np.asarray(path_indices, dtype=np.uint64).reshape(-1)
    if len(path_indices) != m:
        raise ValueError("need exactly one path index per start")
    if m and not np.all(domain.contains(starts)):
        raise OutsideDomainError("every path start must lie inside the domain")
    checkpoints = tuple(int(c) for c in checkpoints)
    if any(c < 0 for c in checkpoints):
        raise ValueError("checkpoint indices must be non-negative")
    k = n_outputs if integrand is not None else 0

    def evaluate(points: np.ndarray) -> np.ndarray:
        if integrand is None:
            return np.zeros((len(points), 0))
        return _as_columns(integrand(points), len(points))

    h = cfg.step
    sqrt_h = np.sqrt(h)
    delta = cfg.exit_tolerance
    gens = [path_generator(cfg.base_seed, int(i)) for i in path_indices]

    pos = starts.copy()
    g_prev = evaluate(pos) if m else np.zeros((0, k))
    integrals = np.zeros((m, k))
    stop_index = np.full(m, cfg.max_steps, dtype=np.int64)
    reason = np.full(m, TRUNCATED, dtype=np.int8)
    final = starts.copy()
    last_interior = starts.copy()
    alive = np.ones(m, dtype=bool)
    if stop_domain is not None and m:
        outside = ~stop_domain.contains(pos)
        stop_index[outside] = 0
        reason[outside] = LEFT_SUBDOMAIN
        alive[outside] = False

    n_cp = len(checkpoints)
    cp_positions = np.zeros((m, n_cp, d))
    cp_integrals = np.zeros((m, n_cp, k))
    cp_running = np.zeros((m, n_cp), dtype=bool)

    def snapshot(j: int) -> None:
        live = np.flatnonzero(alive)
        for ci, c in enumerate(checkpoints):
            if c == j:
                cp_positions[live, ci] = pos[live]
                cp_integrals[live, ci] = integrals[live]
                cp_running[live, ci] = True

    snapshot(0)
    increments = np.empty((m, CHUNK_STEPS, d))
    for j in range(1, cfg.max_steps + 1):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        slot = (j - 1) % CHUNK_STEPS
        if slot == 0:
            for i in idx:
                increments[i] = gens[i].standard_normal((CHUNK_STEPS, d)) * sqrt_h
        new = pos[idx] + increments[idx, slot]
        sd = domain.signed_distance(new)
        killed = sd <= delta
        left = np.zeros_like(killed)
        if stop_domain is not None:
            left = ~killed & ~stop_domain.contains(new)
        moving = ~(killed | left)

        mi = idx[moving]
        if mi.size:
            g_new = evaluate(new[moving])
            integrals[mi] += 0.5 * h * (g_prev[mi] + g_new)
            g_prev[mi] = g_new
            pos[mi] = new[moving]

        si = idx[~moving]
        if si.size:
            integrals[si] += h * g_prev[si]
            last_interior[si] = pos[si]
            stop_index[si] = j
            alive[si] = False
            ki = idx[killed]
            if ki.size:
                reason[ki] = KILLED
                final[ki] = _exit_points(pos[ki], new[killed], domain.signed_distance(pos[ki]), sd[killed])
            li = idx[left]
            if li.size:
                reason[li] = LEFT_SUBDOMAIN
                final[li] = new[left]
        snapshot(j)

    final[alive] = pos[alive]
    last_interior[alive] = pos[alive]
    for ci in range(n_cp):
        stopped = ~cp_running[:, ci]
        cp_positions[stopped, ci] = final[stopped]
        cp_integrals[stopped, ci] = integrals[stopped]

    return BatchWalk(
        step=h,
        integrals=integrals,
        stop_index=stop_index,
        reason=reason,
        final_positions=final,
        last_interior=last_interior,
        checkpoint_indices=checkpoints,
        checkpoint_positions=cp_positions,
        checkpoint_integrals=cp_integrals,
        checkpoint_running=cp_running,
    )


def walk_parallel(
    domain: Domain,
    starts,
    cfg: PathConfig,
    path_indices,
    integrand: Optional[Integrand] = None,
    n_outputs: int = 1,
    stop_domain: Optional[Domain] = None,
    checkpoints: Sequence[int] = (),
    n_jobs: int = 1,
    batch_paths: int = 16_384,
) -> BatchWalk:
    """Split a walk into batches of at most ``batch_paths`` paths and run them with joblib.

    Results do not depend on ``n_jobs`` or ``batch_paths`` because every path
    owns its random stream.
    """
    starts = np.array(starts, dtype=float, ndmin=2)
    path_indices = np.asarray(path_indices, dtype=np.uint64).reshape(-1)
    m = len(starts)
    if m == 0:
        return walk_batch(domain, starts, cfg, path_indices, integrand, n_outputs, stop_domain, checkpoints)
    n_packs = max(1, -(-m // max(1, batch_paths)))
    slices = list(gen_even_slices(m, n_packs))
    if n_jobs == 1 or len(slices) == 1:
        parts = [
            walk_batch(domain, starts[s], cfg, path_indices[s], integrand, n_outputs, stop_domain, checkpoints)
            for s in slices
        ]
    else:
        parts = Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(walk_batch)(domain, starts[s], cfg, path_indices[s], integrand, n_outputs, stop_domain, checkpoints)
            for s in slices
        )
    return BatchWalk.concatenate(parts)


@dataclass(frozen=True)
class ExitTimeEstimate:
    mean: float
    standard_error: float
    truncated_fraction: float
    n_paths: int

    def within(self, value: float, n_se: float = 3.0) -> bool:
        return abs(self.mean - value) <= n_se * self.standard_error


def mean_exit_time(
    domain: Domain, x, cfg: PathConfig, n_paths: int, first_index: int = 0, n_jobs: int = 1
) -> ExitTimeEstimate:
    """Monte Carlo estimate of E_x zeta with its standard error."""
    starts = np.repeat(np.asarray(x, dtype=float)[None, :], n_paths, axis=0)
    walk = walk_parallel(domain, starts, cfg, np.arange(first_index, first_index + n_paths), n_jobs=n_jobs)
    lifetimes = walk.stop_times
    se = float(lifetimes.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else float("inf")
    if walk.truncated_fraction > 1e-3:
        logger.warning("%.3f%% of exit-time paths were truncated", 100 * walk.truncated_fraction)
    return ExitTimeEstimate(float(lifetimes.mean()), se, walk.truncated_fraction, n_paths)


def boundary_decay(
    field: Integrand, domain: Domain, start, cfg: PathConfig, n_paths: int, first_index: int = 0
) -> float:
    """Median of |field| at the last interior position before each path is killed."""
    starts = np.repeat(np.asarray(start, dtype=float)[None, :], n_paths, axis=0)
    walk = walk_batch(domain, starts, cfg, np.arange(first_index, first_index + n_paths))
    values = _as_columns(field(walk.last_interior[walk.killed]), int(walk.killed.sum()))
    return float(np.median(np.abs(values).max(axis=1)))
