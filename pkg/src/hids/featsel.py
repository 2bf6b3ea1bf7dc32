"""Feature selection: correlation filter, forward/backward wrapper search, LASSO."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)


@dataclass
class FeatureSubset:
    indices: list
    method: str
    score: float
    names: list = field(default_factory=list)
    param: float | None = None
    trace: list = field(default_factory=list)

    def __post_init__(self):
        self.indices = sorted(int(i) for i in self.indices)
        if not self.indices:
            raise DataError("feature subset is empty")
        if len(set(self.indices)) != len(self.indices) or self.indices[0] < 0:
            raise DataError("feature subset indices must be unique and non-negative")

    def to_dict(self):
        return {"method": self.method, "param": self.param, "score": self.score,
                "indices": self.indices, "names": list(self.names)}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(d["indices"], d["method"], d["score"], d.get("names", []), d.get("param"))


def apply_subset(ds, subset):
    if subset.indices[-1] >= ds.features.shape[1]:
        raise DataError("feature subset index outside the dataset's columns")
    names = [ds.feature_names[i] for i in subset.indices]
    return ds.with_features(ds.features[:, subset.indices], names)


def correlation_matrix(ds):
    """Pearson correlations; constant columns have 0 off the diagonal."""
    X = np.asarray(getattr(ds, "features", ds), dtype=np.float64)
    if X.shape[0] < 2:
        raise DataError("correlation needs at least two rows")
    Xc = X - X.mean(axis=0)
    sd = np.sqrt((Xc ** 2).mean(axis=0))
    cov = Xc.T @ Xc / X.shape[0]
    ok = sd > 0
    denom = np.outer(np.where(ok, sd, 1.0), np.where(ok, sd, 1.0))
    rho = np.where(np.outer(ok, ok), cov / denom, 0.0)
    rho = np.clip((rho + rho.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(rho, 1.0)
    return rho


def correlation_filter(ds, theta=0.95):
    """Drop the higher-indexed member of every pair with |rho| > theta.

    Pairs are scanned in ascending (i, j) order and a dropped feature no
    longer triggers drops of its own.
    """
    if not 0.0 < theta <= 1.0:
        raise ConfigError(f"theta must lie in (0, 1], got {theta}")
    rho = np.abs(correlation_matrix(ds))
    d = rho.shape[0]
    dropped = set()
    for i in range(d):
        if i in dropped:
            continue
        for j in range(i + 1, d):
            if j not in dropped and rho[i, j] > theta:
                dropped.add(j)
    kept = [i for i in range(d) if i not in dropped]
    sub = rho[np.ix_(kept, kept)]
    off = sub[~np.eye(len(kept), dtype=bool)]
    names = [ds.feature_names[i] for i in kept] if hasattr(ds, "feature_names") else []
    return FeatureSubset(kept, "corr", float(off.max()) if off.size else 0.0, names, theta)


def _fit_softmax(X, y, k, epochs=200, lr=0.5):
    W = np.zeros((X.shape[1], k))
    b = np.zeros(k)
    Y = np.zeros((len(y), k))
    Y[np.arange(len(y)), y] = 1.0
    for _ in range(epochs):
        G = (softmax(X @ W + b, axis=1) - Y) / len(y)
        W -= lr * (X.T @ G)
        b -= lr * G.sum(axis=0)
    return W, b


def logistic_scorer(X_train, y_train, X_val, y_val):
    """Validation accuracy of a softmax-regression classifier trained by gradient descent."""
    k = int(max(y_train.max(), y_val.max())) + 1
    W, b = _fit_softmax(X_train, y_train, k)
    return float(np.mean(np.argmax(X_val @ W + b, axis=1) == y_val))


class WrapperAborted(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


def wrapper_select(ds, direction="forward", scorer=None, max_features=None, patience=1,
                   seed=0, val_fraction=0.25, max_rounds=None):
    """Greedy forward selection or backward elimination.

    Args:
        ds: labeled Dataset.
        direction: ``"forward"`` or ``"backward"``.
        scorer: ``scorer(X_train, y_train, X_val, y_val) -> float``, higher is
            better. Defaults to :func:`logistic_scorer`.
        max_features: forward stops once this many features are selected.
        patience: consecutive non-improving rounds tolerated before stopping;
            the best subset seen is returned.
        seed: seed of the internal stratified train/validation split.
        max_rounds: cap on the number of add/remove rounds.

    Returns:
        FeatureSubset whose ``trace`` lists ``(round, feature, score)``.
    """
    from .dataio import split_indices

    if direction not in ("forward", "backward"):
        raise ConfigError(f"direction must be 'forward' or 'backward', got {direction!r}")
    scorer = scorer or logistic_scorer
    X, y = ds.features, ds.labels
    d = X.shape[1]
    tr, va = split_indices(y, val_fraction, seed, stratified=True)
    trace = []

    def score(cols):
        cols = sorted(cols)
        try:
            return float(scorer(X[tr][:, cols], y[tr], X[va][:, cols], y[va]))
        except Exception as exc:
            raise WrapperAborted(f"scorer failed on columns {cols}: {exc}", trace) from exc

    limit = max_rounds if max_rounds is not None else d
    if direction == "forward":
        cap = d if max_features is None else min(max_features, d)
        current = []
        best, best_score = [], -np.inf
    else:
        current = list(range(d))
        best, best_score = list(current), score(current)
    stale = 0
    for rnd in range(1, limit + 1):
        if direction == "forward":
            if len(current) >= cap:
                break
            cands = [(score(current + [j]), j) for j in range(d) if j not in current]
        else:
            if len(current) <= 1:
                break
            cands = [(score([c for c in current if c != j]), j) for j in current]
        # highest score first, lower feature index on ties
        s, j = max(cands, key=lambda t: (t[0], -t[1]))
        current = current + [j] if direction == "forward" else [c for c in current if c != j]
        trace.append((rnd, j, s))
        improved = s > best_score if direction == "forward" else s >= best_score
        if improved:
            best, best_score, stale = list(current), s, 0
        else:
            stale += 1
            if stale >= patience:
                break
    if not best:
        best = [trace[0][1]] if trace else [0]
    names = [ds.feature_names[i] for i in sorted(best)]
    return FeatureSubset(best, direction, float(best_score), names, None, trace)


@dataclass
class LassoModel:
    coefficients: np.ndarray
    intercept: float
    lam: float
    converged: bool = True
    n_iter: int = 0
    coef_std: np.ndarray | None = None

    @property
    def support(self):
        return np.nonzero(self.coefficients != 0)[0]

    def predict(self, X):
        return np.asarray(X) @ self.coefficients + self.intercept


def _standardize(X):
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    Xs = np.where(sd > 0, (X - mean) / np.where(sd > 0, sd, 1.0), 0.0)
    return Xs, mean, sd


def lambda_max(X, y):
    Xs, _, _ = _standardize(np.asarray(X, dtype=np.float64))
    yc = np.asarray(y, dtype=np.float64) - np.mean(y)
    return float(np.max(np.abs(Xs.T @ yc)) / len(yc))


def soft_threshold(z, t):
    return np.sign(z) * max(abs(z) - t, 0.0)


def lasso_fit(X, y, lam, tol=1e-10, max_iter=100_000):
    """Cyclic coordinate descent on (1/2n)||y - Xb||^2 + lam * ||b||_1.

    Columns are standardized (population sd) and y centered internally; the
    returned coefficients and intercept are in the original units, with the
    standardized-scale solution kept in ``coef_std``.
    """
    if lam < 0:
        raise ConfigError("lambda must be non-negative")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    Xs, mean, sd = _standardize(X)
    y_mean = y.mean()
    r = y - y_mean
    beta = np.zeros(d)
    col_sq = (Xs ** 2).sum(axis=0) / n
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        max_delta = 0.0
        for j in range(d):
            if col_sq[j] == 0:
                continue
            old = beta[j]
            rho = Xs[:, j] @ r / n + col_sq[j] * old
            new = soft_threshold(rho, lam) / col_sq[j]
            if new != old:
                r -= Xs[:, j] * (new - old)
                beta[j] = new
                max_delta = max(max_delta, abs(new - old))
        if max_delta < tol:
            converged = True
            break
    if not converged:
        logger.warning("lasso did not converge in %d iterations", max_iter)
    coef = np.where(sd > 0, beta / np.where(sd > 0, sd, 1.0), 0.0)
    return LassoModel(coef, float(y_mean - mean @ coef), float(lam), converged, it, beta)


def lasso_select(ds, lam, tol=1e-10, max_iter=100_000):
    """LASSO support on +/-1 coded labels (one-vs-rest union when multiclass)."""
    X, y = ds.features, ds.labels
    classes = np.unique(y)
    targets = [classes[-1]] if len(classes) == 2 else list(classes)
    support = set()
    for cls in targets:
        model = lasso_fit(X, np.where(y == cls, 1.0, -1.0), lam, tol, max_iter)
        support.update(int(i) for i in model.support)
    if not support:
        yc = np.where(y == targets[0], 1.0, -1.0)
        Xs, _, _ = _standardize(X)
        fallback = int(np.argmax(np.abs(Xs.T @ (yc - yc.mean()))))
        logger.warning("lambda %g zeroes every coefficient; keeping feature %d", lam, fallback)
        support = {fallback}
    kept = sorted(support)
    return FeatureSubset(kept, "lasso", float(len(kept)), [ds.feature_names[i] for i in kept], lam)
