"""Fully connected autoencoder trained with Adam on an L2-regularized reconstruction loss.

Encoder layers all apply the activation (the latent layer included); decoder
hidden layers apply it too, while the reconstruction layer is linear.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DataError, NumericalError
from .pso import adaptive_lr

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class Autoencoder:
    encoder: list  # [(W, b), ...]
    decoder: list
    activation: str = "relu"

    @property
    def input_dim(self):
        return self.encoder[0][0].shape[0]

    @property
    def latent_dim(self):
        return self.encoder[-1][0].shape[1]

    def params(self):
        return [a for layer in self.encoder + self.decoder for a in layer]

    def encoder_params(self):
        return [a for layer in self.encoder for a in layer]

    def copy(self):
        return Autoencoder([(W.copy(), b.copy()) for W, b in self.encoder],
                           [(W.copy(), b.copy()) for W, b in self.decoder], self.activation)


@dataclass
class AeTrainConfig:
    lr: float = 0.001
    lr_decay: float = 0.0
    lam: float = 1e-5
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    early_stop_loss: float | None = None

    def validate(self):
        if self.lr <= 0 or self.lr_decay < 0 or self.lam < 0:
            raise ConfigError("lr must be positive; lr_decay and lam non-negative")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ConfigError("epochs must be >= 0 and batch_size > 0")


def _act(name):
    if name == "relu":
        return lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0).astype(np.float64)
    if name == "sigmoid":
        return expit, lambda z, a: a * (1.0 - a)
    raise ConfigError(f"unknown activation {name!r}")


def init_autoencoder(input_dim, hidden=(128, 64), latent_dim=64, activation="relu", seed=0):
    """Symmetric autoencoder ``input -> hidden... -> latent -> reversed hidden -> input``."""
    _act(activation)
    if input_dim <= 0 or latent_dim <= 0 or any(h <= 0 for h in hidden):
        raise ConfigError("layer sizes must be positive")
    rng = np.random.default_rng(seed)
    sizes = [input_dim, *hidden, latent_dim]

    def layer(n_in, n_out):
        limit = np.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-limit, limit, size=(n_in, n_out)), np.zeros(n_out)

    enc = [layer(a, b) for a, b in zip(sizes[:-1], sizes[1:])]
    rev = sizes[::-1]
    dec = [layer(a, b) for a, b in zip(rev[:-1], rev[1:])]
    return Autoencoder(enc, dec, activation)


def _matrix(x, dim, what):
    x = np.asarray(getattr(x, "features", x), dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != dim:
        raise DataError(f"{what} has {X.shape[1]} columns, expected {dim}")
    return X, single


def _run(layers, X, act, linear_last):
    f, _ = _act(act)
    pre, outs = [], [X]
    for i, (W, b) in enumerate(layers):
        z = outs[-1] @ W + b
        pre.append(z)
        outs.append(z if (linear_last and i == len(layers) - 1) else f(z))
    return pre, outs


def encode(ae, x):
    X, single = _matrix(x, ae.input_dim, "input")
    z = _run(ae.encoder, X, ae.activation, False)[1][-1]
    return z[0] if single else z


def decode(ae, z):
    Z, single = _matrix(z, ae.latent_dim, "latent input")
    xh = _run(ae.decoder, Z, ae.activation, True)[1][-1]
    return xh[0] if single else xh


def reconstruction_loss(ae, data):
    X, _ = _matrix(data, ae.input_dim, "data")
    if X.shape[0] == 0:
        raise DataError("reconstruction loss needs at least one row")
    return float(np.mean(np.sum((X - decode(ae, encode(ae, X))) ** 2, axis=1)))


def encoder_sq_norm(ae):
    return float(sum(np.sum(p * p) for p in ae.encoder_params()))


def regularized_loss(ae, data, lam):
    return reconstruction_loss(ae, data) + lam * encoder_sq_norm(ae)


def loss_and_grads(ae, X, lam):
    """Regularized loss on ``X`` and gradients aligned with ``ae.params()``."""
    _, dact = _act(ae.activation)
    n = X.shape[0]
    e_pre, e_out = _run(ae.encoder, X, ae.activation, False)
    d_pre, d_out = _run(ae.decoder, e_out[-1], ae.activation, True)
    resid = d_out[-1] - X
    loss = float(np.sum(resid ** 2) / n) + lam * encoder_sq_norm(ae)

    grads = []
    back = 2.0 * resid / n
    for i in range(len(ae.decoder) - 1, -1, -1):
        if i != len(ae.decoder) - 1:
            back = back * dact(d_pre[i], d_out[i + 1])
        W, _ = ae.decoder[i]
        grads = [d_out[i].T @ back, back.sum(axis=0)] + grads
        back = back @ W.T
    enc_grads = []
    for i in range(len(ae.encoder) - 1, -1, -1):
        back = back * dact(e_pre[i], e_out[i + 1])
        W, b = ae.encoder[i]
        enc_grads = [e_out[i].T @ back + 2.0 * lam * W, back.sum(axis=0) + 2.0 * lam * b] + enc_grads
        back = back @ W.T
    return loss, enc_grads + grads


def train(ae, data, cfg):
    """Mini-batch Adam; returns (trained copy, history).

    ``history`` has ``loss``, ``reconstruction`` and ``encoder_norm`` lists:
    index 0 is the untrained model, then one entry per completed epoch.
    """
    cfg.validate()
    X, _ = _matrix(data, ae.input_dim, "data")
    if X.shape[0] == 0:
        raise DataError("cannot train on an empty dataset")
    ae = ae.copy()
    params = ae.params()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng(cfg.seed)
    history = {"loss": [], "reconstruction": [], "encoder_norm": []}

    def record():
        rec = reconstruction_loss(ae, X)
        history["reconstruction"].append(rec)
        history["encoder_norm"].append(encoder_sq_norm(ae))
        history["loss"].append(rec + cfg.lam * history["encoder_norm"][-1])
        if not np.isfinite(history["loss"][-1]):
            raise NumericalError("autoencoder loss is not finite", stage="autoenc.train",
                                 trace=history["loss"])

    record()
    step = 0
    bs = min(cfg.batch_size, len(X))
    for epoch in range(cfg.epochs):
        if cfg.early_stop_loss is not None and history["reconstruction"][-1] <= cfg.early_stop_loss:
            break
        lr = adaptive_lr(cfg.lr, cfg.lr_decay, epoch)
        order = rng.permutation(len(X))
        for s in range(0, len(X), bs):
            _, grads = loss_and_grads(ae, X[order[s:s + bs]], cfg.lam)
            step += 1
            c1 = 1.0 - ADAM_BETA1 ** step
            c2 = 1.0 - ADAM_BETA2 ** step
            for p, g, mi, vi in zip(params, grads, m, v):
                mi *= ADAM_BETA1
                mi += (1.0 - ADAM_BETA1) * g
                vi *= ADAM_BETA2
                vi += (1.0 - ADAM_BETA2) * g * g
                p -= lr * (mi / c1) / (np.sqrt(vi / c2) + ADAM_EPS)
        record()
    return ae, history


def compress(ae, ds):
    """Replace a dataset's features with their latent codes."""
    z = encode(ae, ds.features if ds.n_rows else np.empty((0, ae.input_dim)))
    z = np.asarray(z).reshape(ds.n_rows, ae.latent_dim)
    return ds.with_features(z, [f"z{i}" for i in range(ae.latent_dim)])
