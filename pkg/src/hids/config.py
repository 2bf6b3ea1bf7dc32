"""Run configuration: nested dataclasses loaded from JSON or TOML.

Unknown keys are rejected with their dotted path so that typos surface
immediately. Overrides use the same dotted paths (``som.eta0=0.05``).
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

POLICIES = ("escalate", "dbn-only", "som-only")


@dataclass
class DataConfig:
    train_path: str | None = None
    test_path: str | None = None
    schema: str = "nsl_kdd"
    taxonomy: str | None = "nsl_kdd"
    strict_labels: bool = False
    classes: list | None = None
    subsample: int | None = None
    test_fraction: float = 0.2
    stratified: bool = True
    encoding: str = "onehot"
    normalization: str = "minmax"


@dataclass
class FeatselConfig:
    method: str = "none"
    theta: float = 0.95
    lam: float = 0.01
    max_features: int | None = None
    patience: int = 1


@dataclass
class AeConfig:
    hidden: list = field(default_factory=lambda: [128, 64])
    latent_dim: int = 64
    activation: str = "relu"
    lr: float = 0.001
    lr_decay: float = 0.0
    lam: float = 1e-5
    epochs: int = 20
    batch_size: int = 64
    early_stop_loss: float | None = None


@dataclass
class SomConfig:
    width: int = 10
    height: int = 10
    eta0: float = 0.1
    sigma0: float = 3.0
    tau_eta: float | None = None
    tau_sigma: float | None = None
    epochs: int = 5
    neighborhood_mode: str = "lattice"
    threshold_percentile: float = 95.0
    init_range: list = field(default_factory=lambda: [0.0, 1.0])


@dataclass
class DbnConfig:
    hidden: list = field(default_factory=lambda: [128, 64, 32])
    lr: float = 0.01
    lr_decay: float = 0.0
    pretrain_epochs: int = 10
    finetune_epochs: int = 30
    finetune_lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 64
    cd_steps: int = 1


def default_space():
    return [
        {"name": "dbn_lr", "type": "continuous", "lo": 0.0001, "hi": 0.01, "targets": ["dbn.lr"]},
        {"name": "ae_lr", "type": "continuous", "lo": 0.0001, "hi": 0.01, "targets": ["ae.lr"]},
        {"name": "hidden_units", "type": "integer", "lo": 32, "hi": 128,
         "targets": ["dbn.hidden", "ae.hidden"]},
        {"name": "som_neighborhood", "type": "continuous", "lo": 1.0, "hi": 5.0,
         "targets": ["som.sigma0"]},
        {"name": "activation", "type": "categorical", "options": ["relu", "sigmoid"],
         "targets": ["ae.activation"]},
    ]


@dataclass
class PsoConfig:
    enabled: bool = False
    n_particles: int = 30
    n_iters: int = 100
    omega: float = 0.729
    c1: float = 1.49445
    c2: float = 1.49445
    budget_fraction: float = 0.2
    val_fraction: float = 0.2
    fitness_weights: list = field(default_factory=lambda: [0.5, 0.25, 0.25])
    cost_weights: list = field(default_factory=lambda: [1 / 3, 1 / 3, 1 / 3])
    space: list = field(default_factory=default_space)


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    featsel: FeatselConfig = field(default_factory=FeatselConfig)
    ae: AeConfig = field(default_factory=AeConfig)
    som: SomConfig = field(default_factory=SomConfig)
    dbn: DbnConfig = field(default_factory=DbnConfig)
    pso: PsoConfig = field(default_factory=PsoConfig)
    integration: str = "escalate"
    normal_label: str = "Normal"
    seed: int = 0

    def to_dict(self):
        return dataclasses.asdict(self)

    def validate(self):
        if self.integration not in POLICIES:
            raise ConfigError(f"integration: unknown policy {self.integration!r}")
        if self.featsel.method not in ("none", "corr", "forward", "backward", "lasso"):
            raise ConfigError(f"featsel.method: unknown method {self.featsel.method!r}")
        if self.data.encoding not in ("onehot", "label"):
            raise ConfigError(f"data.encoding: unknown mode {self.data.encoding!r}")
        if self.data.normalization not in ("minmax", "zscore"):
            raise ConfigError(f"data.normalization: unknown method {self.data.normalization!r}")
        if not 0.0 < self.data.test_fraction < 1.0:
            raise ConfigError("data.test_fraction must lie in (0, 1)")
        if self.ae.activation not in ("relu", "sigmoid"):
            raise ConfigError(f"ae.activation: unknown activation {self.ae.activation!r}")
        if self.som.neighborhood_mode not in ("lattice", "paper_literal"):
            raise ConfigError(f"som.neighborhood_mode: unknown mode {self.som.neighborhood_mode!r}")
        if not isinstance(self.seed, int):
            raise ConfigError("seed must be an integer")
        return self


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a table, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in fields:
            raise ConfigError(f"unknown config key {path!r}")
        sub = _NESTED.get((cls, key))
        kwargs[key] = _build(sub, value, path + ".") if sub else value
    return cls(**kwargs)


_NESTED = {
    (PipelineConfig, "data"): DataConfig,
    (PipelineConfig, "featsel"): FeatselConfig,
    (PipelineConfig, "ae"): AeConfig,
    (PipelineConfig, "som"): SomConfig,
    (PipelineConfig, "dbn"): DbnConfig,
    (PipelineConfig, "pso"): PsoConfig,
}


def from_dict(data):
    return _build(PipelineConfig, data, "").validate()


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_path(data, dotted, value):
    keys = dotted.split(".")
    node = data
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[keys[-1]] = value


def get_path(data, dotted):
    node = data
    for k in dotted.split("."):
        if not isinstance(node, dict) or k not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[k]
    return node


def apply_overrides(data, overrides):
    """Apply ``key=value`` strings; values are parsed as JSON when possible."""
    data = copy.deepcopy(data)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        set_path(data, key.strip(), _parse_value(value.strip()))
    return data


def read_config_file(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python 3.10
            import tomli as tomllib

        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_config(path=None, overrides=(), seed=None):
    """Defaults, then the file's values, then overrides, then ``seed``."""
    data = PipelineConfig().to_dict()
    if path is not None:
        _merge(data, read_config_file(path), "")
    data = apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = seed
    return from_dict(data)


def _merge(base, update, prefix):
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key {prefix + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict) and key != "space":
            _merge(base[key], value, f"{prefix}{key}.")
        else:
            base[key] = value


def save_config(cfg, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
