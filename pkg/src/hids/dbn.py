"""Restricted Boltzmann machines and the stacked deep belief network classifier."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp, softmax

from .errors import ConfigError, DataError, NumericalError
from .pso import adaptive_lr

logger = logging.getLogger(__name__)

MAX_EXACT_UNITS = 20


@dataclass
class Rbm:
    W: np.ndarray  # (n_visible, n_hidden)
    b: np.ndarray  # visible bias
    c: np.ndarray  # hidden bias

    @property
    def n_visible(self):
        return self.W.shape[0]

    @property
    def n_hidden(self):
        return self.W.shape[1]

    def copy(self):
        return Rbm(self.W.copy(), self.b.copy(), self.c.copy())


@dataclass
class TrainConfig:
    lr: float = 0.01
    lr_decay: float = 0.0
    epochs: int = 10
    batch_size: int = 64
    cd_steps: int = 1
    momentum: float = 0.0
    seed: int = 0

    def validate(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.lr_decay < 0:
            raise ConfigError("lr_decay must be non-negative")
        if self.epochs < 0 or self.batch_size <= 0 or self.cd_steps <= 0:
            raise ConfigError("epochs must be >= 0, batch_size and cd_steps > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_rbm(n_visible, n_hidden, rng):
    return Rbm(_glorot(rng, n_visible, n_hidden), np.zeros(n_visible), np.zeros(n_hidden))


def energy(rbm, x, h):
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if x.shape != (rbm.n_visible,) or h.shape != (rbm.n_hidden,):
        raise DataError(f"expected x of shape ({rbm.n_visible},) and h of shape ({rbm.n_hidden},)")
    return float(-(rbm.b @ x) - (rbm.c @ h) - x @ rbm.W @ h)


def hidden_probs(rbm, x):
    return expit(rbm.c + np.asarray(x, dtype=np.float64) @ rbm.W)


def visible_probs(rbm, h):
    return expit(rbm.b + np.asarray(h, dtype=np.float64) @ rbm.W.T)


def _bernoulli(p, rng):
    return (rng.random(p.shape) < p).astype(np.float64)


def cd_statistics(rbm, batch, k, rng):
    """Positive and negative phase statistics of CD-k, averaged over the batch.

    The positive phase uses exact hidden probabilities given the data; the
    negative phase runs k alternating Gibbs steps from the data with sampled
    hidden and visible states.
    """
    x = np.asarray(batch, dtype=np.float64)
    ph0 = hidden_probs(rbm, x)
    n = x.shape[0]
    h = _bernoulli(ph0, rng)
    for _ in range(k):
        v = _bernoulli(visible_probs(rbm, h), rng)
        ph = hidden_probs(rbm, v)
        h = _bernoulli(ph, rng)
    return {
        "pos_W": x.T @ ph0 / n,
        "neg_W": v.T @ ph / n,
        "pos_b": x.mean(axis=0),
        "neg_b": v.mean(axis=0),
        "pos_c": ph0.mean(axis=0),
        "neg_c": ph.mean(axis=0),
    }


def cd_update(rbm, batch, eta, k, rng):
    """One CD-k step; returns (updated copy, diagnostics)."""
    stats = cd_statistics(rbm, batch, k, rng)
    new = Rbm(
        rbm.W + eta * (stats["pos_W"] - stats["neg_W"]),
        rbm.b + eta * (stats["pos_b"] - stats["neg_b"]),
        rbm.c + eta * (stats["pos_c"] - stats["neg_c"]),
    )
    if not all(np.all(np.isfinite(a)) for a in (new.W, new.b, new.c)):
        raise NumericalError("non-finite RBM update", stage="cd_update", trace=[stats])
    return new, stats


def _all_states(n):
    return np.array(list(itertools.product((0.0, 1.0), repeat=n))).reshape(2 ** n, n)


def _check_exact_size(rbm):
    if rbm.n_visible + rbm.n_hidden > MAX_EXACT_UNITS:
        raise ConfigError(
            f"exact enumeration limited to {MAX_EXACT_UNITS} units, "
            f"RBM has {rbm.n_visible + rbm.n_hidden}")


def _joint_neg_energy(rbm):
    V = _all_states(rbm.n_visible)
    H = _all_states(rbm.n_hidden)
    return V, H, (V @ rbm.b)[:, None] + (H @ rbm.c)[None, :] + V @ rbm.W @ H.T


def exact_loglik(rbm, data):
    """Sum of log P(x) over ``data`` with Z from full joint enumeration."""
    _check_exact_size(rbm)
    x = np.atleast_2d(np.asarray(data, dtype=np.float64))
    _, H, neg_e = _joint_neg_energy(rbm)
    log_z = logsumexp(neg_e)
    per_x = (x @ rbm.b)[:, None] + (H @ rbm.c)[None, :] + x @ rbm.W @ H.T
    return float(np.sum(logsumexp(per_x, axis=1) - log_z))


def exact_gradient(rbm, data):
    """Exact gradient of the mean log-likelihood, by enumeration."""
    _check_exact_size(rbm)
    x = np.atleast_2d(np.asarray(data, dtype=np.float64))
    V, H, neg_e = _joint_neg_energy(rbm)
    p = np.exp(neg_e - logsumexp(neg_e))
    ph = hidden_probs(rbm, x)
    return {
        "W": x.T @ ph / len(x) - V.T @ p @ H,
        "b": x.mean(axis=0) - p.sum(axis=1) @ V,
        "c": ph.mean(axis=0) - p.sum(axis=0) @ H,
    }


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    bs = min(batch_size, n)
    return [order[s:s + bs] for s in range(0, n, bs)]


def train_rbm(rbm, data, cfg, rng, layer=0):
    """CD-k training of one RBM; returns (rbm, per-epoch reconstruction error)."""
    X = np.asarray(data, dtype=np.float64)
    trace = []
    for epoch in range(cfg.epochs):
        eta = adaptive_lr(cfg.lr, cfg.lr_decay, epoch)
        for rows in _batches(len(X), cfg.batch_size, rng):
            try:
                rbm, _ = cd_update(rbm, X[rows], eta, cfg.cd_steps, rng)
            except NumericalError as exc:
                raise NumericalError(f"RBM layer {layer} diverged in epoch {epoch}",
                                     stage=f"dbn.pretrain.layer{layer}", trace=trace) from exc
        recon = visible_probs(rbm, hidden_probs(rbm, X))
        err = float(np.mean(np.sum((X - recon) ** 2, axis=1)))
        if not np.isfinite(err):
            raise NumericalError(f"RBM layer {layer} loss is not finite",
                                 stage=f"dbn.pretrain.layer{layer}", trace=trace)
        trace.append(err)
    return rbm, trace


def pretrain(layer_sizes, data, cfg):
    """Greedy layer-wise CD training of an RBM stack.

    Args:
        layer_sizes: ``[n_visible, h1, h2, ...]``.
        data: matrix (or Dataset) with values in [0, 1].
        cfg: :class:`TrainConfig`.

    Returns:
        (list of Rbm, list of per-layer reconstruction-error traces). Each
        layer trains on the hidden probabilities of the layer below.
    """
    cfg.validate()
    X = np.asarray(getattr(data, "features", data), dtype=np.float64)
    if X.shape[1] != layer_sizes[0]:
        raise DataError(f"data has {X.shape[1]} columns, first layer expects {layer_sizes[0]}")
    rng = np.random.default_rng(cfg.seed)
    rbms, traces = [], []
    for i, (n_vis, n_hid) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        rbm, trace = train_rbm(init_rbm(n_vis, n_hid, rng), X, cfg, rng, layer=i)
        rbms.append(rbm)
        traces.append(trace)
        X = hidden_probs(rbm, X)
    return rbms, traces


@dataclass
class DbnModel:
    rbm_layers: list
    W_out: np.ndarray
    b_out: np.ndarray
    layer_sizes: list = field(default_factory=list)

    @property
    def n_classes(self):
        return self.W_out.shape[1]

    @property
    def n_inputs(self):
        return self.rbm_layers[0].n_visible if self.rbm_layers else self.W_out.shape[0]

    def copy(self):
        return DbnModel([r.copy() for r in self.rbm_layers], self.W_out.copy(),
                        self.b_out.copy(), list(self.layer_sizes))

    def params(self):
        """Flat list of trainable arrays in backprop order: (W_l, c_l)..., W_out, b_out."""
        out = []
        for r in self.rbm_layers:
            out += [r.W, r.c]
        return out + [self.W_out, self.b_out]


def build_dbn(rbms, n_inputs, n_classes, seed=0):
    """Stack pretrained RBMs under a freshly initialized softmax layer."""
    rng = np.random.default_rng(seed)
    top = rbms[-1].n_hidden if rbms else n_inputs
    sizes = [n_inputs] + [r.n_hidden for r in rbms]
    return DbnModel([r.copy() for r in rbms], _glorot(rng, top, n_classes),
                    np.zeros(n_classes), sizes)


def _forward(model, X):
    acts = [X]
    for r in model.rbm_layers:
        acts.append(expit(acts[-1] @ r.W + r.c))
    logits = acts[-1] @ model.W_out + model.b_out
    return acts, softmax(logits, axis=1)


def cross_entropy(probs, Y):
    return float(-np.mean(np.sum(Y * np.log(np.clip(probs, 1e-300, None)), axis=1)))


def loss_and_grads(model, X, Y):
    """Mean cross-entropy and its gradients, aligned with ``model.params()``."""
    acts, probs = _forward(model, X)
    n = X.shape[0]
    delta = (probs - Y) / n
    grads = [acts[-1].T @ delta, delta.sum(axis=0)]
    back = delta @ model.W_out.T
    for li in range(len(model.rbm_layers) - 1, -1, -1):
        a = acts[li + 1]
        dz = back * a * (1.0 - a)
        grads = [acts[li].T @ dz, dz.sum(axis=0)] + grads
        back = dz @ model.rbm_layers[li].W.T
    return cross_entropy(probs, Y), grads


def one_hot(labels, k):
    Y = np.zeros((len(labels), k))
    Y[np.arange(len(labels)), labels] = 1.0
    return Y


def finetune(model, data, labels, cfg):
    """Mini-batch backprop on the cross-entropy; returns (model, per-epoch loss)."""
    cfg.validate()
    X = np.asarray(getattr(data, "features", data), dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if X.shape[1] != model.n_inputs:
        raise DataError(f"data has {X.shape[1]} columns, model expects {model.n_inputs}")
    model = model.copy()
    Y = one_hot(labels, model.n_classes)
    rng = np.random.default_rng(cfg.seed)
    params = model.params()
    velocity = [np.zeros_like(p) for p in params]
    trace = []
    for epoch in range(cfg.epochs):
        eta = adaptive_lr(cfg.lr, cfg.lr_decay, epoch)
        for rows in _batches(len(X), cfg.batch_size, rng):
            _, grads = loss_and_grads(model, X[rows], Y[rows])
            for p, g, v in zip(params, grads, velocity):
                v *= cfg.momentum
                v -= eta * g
                p += v
        loss = cross_entropy(_forward(model, X)[1], Y)
        if not np.isfinite(loss):
            raise NumericalError(f"fine-tuning loss not finite in epoch {epoch}",
                                 stage="dbn.finetune", trace=trace)
        trace.append(loss)
    return model, trace


def predict(model, x):
    """Class probabilities for one row or a matrix of rows."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != model.n_inputs:
        raise DataError(f"input has {X.shape[1]} features, model expects {model.n_inputs}")
    probs = _forward(model, X)[1]
    return probs[0] if single else probs


def predict_class(model, x):
    return np.argmax(predict(model, x), axis=-1)
