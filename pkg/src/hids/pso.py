"""Particle swarm optimization over mixed continuous/integer/categorical spaces.

Every dimension is searched as a continuous interval; integer and categorical
dimensions are rounded only when a position is decoded for evaluation.
Minimization throughout.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError

logger = logging.getLogger(__name__)

OMEGA = 0.729
C1 = C2 = 1.49445
VMAX_FRACTION = 0.2


@dataclass(frozen=True)
class Continuous:
    name: str
    lo: float
    hi: float
    targets: tuple = ()


@dataclass(frozen=True)
class Integer:
    name: str
    lo: int
    hi: int
    targets: tuple = ()


@dataclass(frozen=True)
class Categorical:
    name: str
    options: tuple
    targets: tuple = ()


@dataclass
class SearchSpace:
    dims: list

    def __post_init__(self):
        for d in self.dims:
            if isinstance(d, Categorical):
                if not d.options:
                    raise ConfigError(f"categorical dimension {d.name!r} has no options")
            elif not d.lo < d.hi:
                raise ConfigError(f"dimension {d.name!r} needs lo < hi, got [{d.lo}, {d.hi}]")

    @property
    def names(self):
        return [d.name for d in self.dims]

    def bounds(self):
        lo = np.array([0.0 if isinstance(d, Categorical) else float(d.lo) for d in self.dims])
        hi = np.array([len(d.options) - 1.0 if isinstance(d, Categorical) else float(d.hi)
                       for d in self.dims])
        return lo, hi

    def decode(self, position):
        """Map a continuous position to typed values keyed by dimension name."""
        lo, hi = self.bounds()
        pos = np.clip(np.asarray(position, dtype=np.float64), lo, hi)
        out = {}
        for d, p in zip(self.dims, pos):
            if isinstance(d, Continuous):
                out[d.name] = float(p)
            elif isinstance(d, Integer):
                out[d.name] = int(math.floor(p + 0.5))
            else:
                out[d.name] = d.options[int(math.floor(p + 0.5))]
        return out

    def encode(self, values):
        """Inverse of :meth:`decode` for an exact typed point."""
        pos = []
        for d in self.dims:
            v = values[d.name]
            pos.append(float(d.options.index(v)) if isinstance(d, Categorical) else float(v))
        return np.array(pos)


@dataclass
class Particle:
    position: np.ndarray
    velocity: np.ndarray
    best_position: np.ndarray
    best_fitness: float
    rng: np.random.Generator = field(repr=False, default=None)


@dataclass
class Swarm:
    particles: list
    global_best: np.ndarray
    global_best_fitness: float
    lo: np.ndarray
    hi: np.ndarray
    v_max: np.ndarray
    omega: float = OMEGA
    c1: float = C1
    c2: float = C2
    n_jobs: int = 1
    last_fitness: np.ndarray | None = None
    any_valid: bool = False


def _safe(values):
    values = np.asarray(values, dtype=np.float64)
    bad = np.isnan(values)
    if bad.any():
        logger.warning("%d fitness evaluation(s) returned NaN; treated as +inf", int(bad.sum()))
    return np.where(bad, math.inf, values), not bad.all()


def default_jobs():
    try:
        return max(1, int(os.environ.get("HIDS_THREADS", "1")))
    except ValueError:
        return 1


def _evaluate(fitness, positions, n_jobs):
    """Returns (fitness array with NaN replaced by +inf, whether any value was not NaN)."""
    if n_jobs > 1 and len(positions) > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            return _safe(list(pool.map(fitness, positions)))
    return _safe([fitness(p) for p in positions])


def _refresh_global(swarm):
    fits = [p.best_fitness for p in swarm.particles]
    i = int(np.argmin(fits))
    if fits[i] < swarm.global_best_fitness or swarm.global_best is None:
        swarm.global_best = swarm.particles[i].best_position.copy()
        swarm.global_best_fitness = fits[i]


def init_swarm(lo, hi, n_particles, fitness, seed, omega=OMEGA, c1=C1, c2=C2,
               initial_positions=None, n_jobs=1):
    """Random positions within bounds, velocities within +/- v_max, evaluated once.

    Rows of ``initial_positions`` replace the first random positions, so a
    known configuration can be seeded into the swarm.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if n_particles <= 0:
        raise ConfigError("n_particles must be positive")
    v_max = VMAX_FRACTION * (hi - lo)
    streams = np.random.SeedSequence(seed).spawn(n_particles)
    rngs = [np.random.default_rng(s) for s in streams]
    positions = [r.uniform(lo, hi) for r in rngs]
    velocities = [r.uniform(-v_max, v_max) for r in rngs]
    if initial_positions is not None:
        for i, p in enumerate(np.atleast_2d(initial_positions)[:n_particles]):
            positions[i] = np.clip(np.asarray(p, dtype=np.float64), lo, hi)
    fits, valid = _evaluate(fitness, positions, n_jobs)
    particles = [Particle(x, v, x.copy(), f, r)
                 for x, v, f, r in zip(positions, velocities, fits, rngs)]
    swarm = Swarm(particles, None, math.inf, lo, hi, v_max, omega, c1, c2, n_jobs, fits, valid)
    _refresh_global(swarm)
    if swarm.global_best is None:
        swarm.global_best = particles[0].best_position.copy()
    return swarm


def step(swarm, fitness):
    """One velocity/position update of every particle, then re-evaluation."""
    g = swarm.global_best
    for p in swarm.particles:
        r1 = p.rng.random(p.position.shape)
        r2 = p.rng.random(p.position.shape)
        v = (swarm.omega * p.velocity
             + swarm.c1 * r1 * (p.best_position - p.position)
             + swarm.c2 * r2 * (g - p.position))
        p.velocity = np.clip(v, -swarm.v_max, swarm.v_max)
        p.position = np.clip(p.position + p.velocity, swarm.lo, swarm.hi)
    fits, valid = _evaluate(fitness, [p.position for p in swarm.particles], swarm.n_jobs)
    swarm.any_valid = swarm.any_valid or valid
    for p, f in zip(swarm.particles, fits):
        if f < p.best_fitness:
            p.best_fitness = f
            p.best_position = p.position.copy()
    swarm.last_fitness = fits
    _refresh_global(swarm)
    return swarm


@dataclass
class OptimizeResult:
    best_position: np.ndarray
    best_fitness: float
    best_params: dict | None
    trace: list  # (iteration, best_fitness, mean_fitness)


def optimize(space, fitness, n_particles=30, n_iters=100, seed=0, omega=OMEGA, c1=C1, c2=C2,
             initial_positions=None, n_jobs=None):
    """Run PSO on ``fitness(params)`` where params is the decoded dict.

    ``space`` may also be a ``(lo, hi)`` pair of arrays, in which case the
    fitness receives the raw position vector.

    Returns:
        OptimizeResult with one trace row per iteration after initialization.
    """
    if isinstance(space, SearchSpace):
        lo, hi = space.bounds()

        def objective(x):
            return fitness(space.decode(x))
    else:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in space)
        objective = fitness
    if n_iters < 0:
        raise ConfigError("n_iters must be non-negative")
    jobs = default_jobs() if n_jobs is None else n_jobs
    swarm = init_swarm(lo, hi, n_particles, objective, seed, omega, c1, c2,
                       initial_positions, jobs)
    trace = []
    for it in range(1, n_iters + 1):
        step(swarm, objective)
        finite = swarm.last_fitness[np.isfinite(swarm.last_fitness)]
        mean = float(finite.mean()) if finite.size else math.inf
        trace.append((it, float(swarm.global_best_fitness), mean))
    if not swarm.any_valid:
        raise NumericalError("every fitness evaluation returned NaN", stage="pso")
    params = space.decode(swarm.global_best) if isinstance(space, SearchSpace) else None
    return OptimizeResult(swarm.global_best.copy(), float(swarm.global_best_fitness), params, trace)


@dataclass(frozen=True)
class CompositeCostWeights:
    alpha: float = 1.0 / 3.0
    beta: float = 1.0 / 3.0
    gamma: float = 1.0 / 3.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0 or self.alpha + self.beta + self.gamma <= 0:
            raise ConfigError("composite cost weights must be non-negative with a positive sum")


def composite_cost(l_rec, l_clus, l_hier, w=CompositeCostWeights()):
    return w.alpha * l_rec + w.beta * l_clus + w.gamma * l_hier


def adaptive_lr(eta0, alpha, t):
    """Inverse-time decay eta0 / (1 + alpha * t)."""
    return eta0 / (1.0 + alpha * t)
