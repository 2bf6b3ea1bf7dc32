"""Self-organizing map: training, quantization-error anomaly scoring, U-matrix."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericalError

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-6


@dataclass
class SomGrid:
    """Rectangular lattice; node ``i`` sits at row ``i // width``, col ``i % width``."""

    width: int
    height: int
    weights: np.ndarray

    @property
    def dim(self):
        return self.weights.shape[1]

    @property
    def n_nodes(self):
        return self.width * self.height

    def coords(self):
        idx = np.arange(self.n_nodes)
        return np.stack([idx // self.width, idx % self.width], axis=1)

    def copy(self):
        return SomGrid(self.width, self.height, self.weights.copy())


@dataclass
class SomSchedule:
    eta0: float = 0.1
    sigma0: float = 3.0
    tau_eta: float | None = None
    tau_sigma: float | None = None
    epochs: int = 10
    neighborhood_mode: str = "lattice"

    def validate(self):
        if not 0.0 <= self.eta0 <= 1.0:
            raise ConfigError(f"eta0 must lie in [0, 1], got {self.eta0}")
        if self.sigma0 < 0.5:
            raise ConfigError(f"sigma0 must be >= 0.5, got {self.sigma0}")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.neighborhood_mode not in ("lattice", "paper_literal"):
            raise ConfigError(f"unknown neighborhood mode {self.neighborhood_mode!r}")

    def time_constants(self, total_steps):
        """Decay constants; unset ones default to total/ln(sigma0), i.e. sigma ends near 1."""
        log_s = math.log(self.sigma0)
        default = total_steps / log_s if log_s > 0 else float(max(total_steps, 1))
        default = max(default, 1e-12)
        return (self.tau_eta or default, self.tau_sigma or default)


@dataclass
class AnomalyModel:
    grid: SomGrid
    threshold: float
    threshold_percentile: float


def _as_matrix(data):
    x = getattr(data, "features", data)
    return np.asarray(x, dtype=np.float64)


def init_grid(width, height, dim, seed, init_range=(0.0, 1.0)):
    lo, hi = init_range
    if width <= 0 or height <= 0 or dim <= 0:
        raise ConfigError("grid width, height and dim must be positive")
    if lo > hi:
        raise ConfigError(f"init_range lower bound exceeds the upper bound: {init_range}")
    rng = np.random.default_rng(seed)
    if lo == hi:
        weights = np.full((width * height, dim), float(lo))
    else:
        weights = rng.uniform(lo, hi, size=(width * height, dim))
    return SomGrid(width, height, weights)


def _check_vector(grid, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (grid.dim,):
        raise DataError(f"input has shape {x.shape}, grid expects ({grid.dim},)")
    if not np.all(np.isfinite(x)):
        raise DataError("input contains NaN or Inf")
    return x


def find_bmu(grid, x):
    """Index of the nearest node; the lowest index wins ties."""
    x = _check_vector(grid, x)
    return int(np.argmin(((grid.weights - x) ** 2).sum(axis=1)))


def _sq_distances(grid, X, chunk=2048):
    out = np.empty((X.shape[0], grid.n_nodes))
    for s in range(0, X.shape[0], chunk):
        diff = X[s:s + chunk, None, :] - grid.weights[None, :, :]
        out[s:s + chunk] = (diff ** 2).sum(axis=2)
    return out


def find_bmus(grid, X):
    X = _as_matrix(X)
    if X.ndim != 2 or X.shape[1] != grid.dim:
        raise DataError(f"input has {X.shape[-1]} columns, grid expects {grid.dim}")
    if not np.all(np.isfinite(X)):
        raise DataError("input contains NaN or Inf")
    return np.argmin(_sq_distances(grid, X), axis=1)


def quantization_error(grid, x):
    x = _check_vector(grid, x)
    return float(np.sqrt(((grid.weights - x) ** 2).sum(axis=1).min()))


def quantization_errors(grid, X):
    X = _as_matrix(X)
    if X.ndim != 2 or X.shape[1] != grid.dim:
        raise DataError(f"input has {X.shape[-1]} columns, grid expects {grid.dim}")
    if X.shape[0] == 0:
        return np.empty(0)
    return np.sqrt(_sq_distances(grid, X).min(axis=1))


def train(grid, data, sched, seed):
    """Online training; returns (trained grid, mean-QE trace).

    The trace holds the mean quantization error of the untrained grid followed
    by one entry per epoch. The step counter ``t`` counts sample presentations
    across all epochs.
    """
    sched.validate()
    X = _as_matrix(data)
    if X.shape[0] == 0:
        raise DataError("cannot train a SOM on an empty dataset")
    if X.shape[1] != grid.dim:
        raise DataError(f"data has {X.shape[1]} columns, grid expects {grid.dim}")
    grid = grid.copy()
    W = grid.weights
    coords = grid.coords().astype(np.float64)
    lattice_sq = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(axis=2)
    n = X.shape[0]
    tau_eta, tau_sigma = sched.time_constants(n * sched.epochs)
    rng = np.random.default_rng(seed)
    trace = [float(quantization_errors(grid, X).mean())]
    warned = False
    t = 0
    for _ in range(sched.epochs):
        for i in rng.permutation(n):
            x = X[i]
            eta = sched.eta0 * math.exp(-t / tau_eta)
            sigma = sched.sigma0 * math.exp(-t / tau_sigma)
            if sigma < SIGMA_FLOOR:
                sigma = SIGMA_FLOOR
                if not warned:
                    logger.warning("neighborhood width fell below %g; clamped", SIGMA_FLOOR)
                    warned = True
            diff = x - W
            d2 = (diff ** 2).sum(axis=1)
            if sched.neighborhood_mode == "lattice":
                bmu = int(np.argmin(d2))
                h = np.exp(-lattice_sq[bmu] / (2.0 * sigma * sigma))
            else:
                h = np.exp(-d2 / (2.0 * sigma * sigma))
            W += (eta * h)[:, None] * diff
            t += 1
        if not np.all(np.isfinite(W)):
            raise NumericalError("SOM weights became non-finite", stage="som.train", trace=trace)
        trace.append(float(quantization_errors(grid, X).mean()))
    return grid, trace


def nearest_rank(values, percentile):
    values = np.sort(np.asarray(values, dtype=np.float64))
    if values.size == 0:
        raise DataError("cannot take a percentile of no values")
    rank = max(1, math.ceil(percentile / 100.0 * values.size))
    return float(values[rank - 1])


def fit_threshold(grid, data, percentile=95.0):
    """Anomaly threshold at the nearest-rank percentile of training QEs."""
    if not 0.0 < percentile <= 100.0:
        raise ConfigError(f"percentile must lie in (0, 100], got {percentile}")
    X = _as_matrix(data)
    if X.shape[0] == 0:
        raise DataError("cannot fit a threshold on an empty dataset")
    return AnomalyModel(grid, nearest_rank(quantization_errors(grid, X), percentile), percentile)


def is_anomaly(model, x):
    return quantization_error(model.grid, x) > model.threshold


def anomaly_flags(model, X):
    qe = quantization_errors(model.grid, X)
    return qe > model.threshold, qe


def u_matrix(grid):
    """Mean distance from each node to its 4-neighbours, shaped (height, width)."""
    W = grid.weights.reshape(grid.height, grid.width, grid.dim)
    total = np.zeros((grid.height, grid.width))
    count = np.zeros((grid.height, grid.width))
    vert = np.sqrt(((W[1:] - W[:-1]) ** 2).sum(axis=2))
    horiz = np.sqrt(((W[:, 1:] - W[:, :-1]) ** 2).sum(axis=2))
    total[1:] += vert
    total[:-1] += vert
    count[1:] += 1
    count[:-1] += 1
    total[:, 1:] += horiz
    total[:, :-1] += horiz
    count[:, 1:] += 1
    count[:, :-1] += 1
    return np.where(count > 0, total / np.maximum(count, 1), 0.0)


def bmu_hits(grid, X):
    hits = np.bincount(find_bmus(grid, X), minlength=grid.n_nodes)
    return hits.reshape(grid.height, grid.width)


def write_grid_csv(path, matrix):
    matrix = np.asarray(matrix)
    fmt = repr if np.issubdtype(matrix.dtype, np.floating) else str
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in matrix.tolist():
            w.writerow([fmt(v) for v in row])
