"""End-to-end orchestration: preprocessing, AE compression, SOM anomaly model,
DBN classifier, their integration, evaluation, PSO search and bundle I/O.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autoenc, dataio, dbn, featsel, metrics, pso, som
from .config import PipelineConfig, from_dict, get_path, set_path
from .errors import BundleError, ConfigError, DataError, HidsError, NumericalError

logger = logging.getLogger(__name__)

UNKNOWN_ATTACK = "unknown-attack"
FORMAT_MAJOR = 1
FORMAT_MINOR = 0
MAGIC = b"HIDS"
_HEADER = struct.Struct("<4sHHdQ")  # magic, major, minor, timestamp, meta length
_TIMESTAMP_SLICE = slice(8, 16)


class _Stage:
    """Context manager that tags a failing stage and logs its duration."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        self.t0 = time.perf_counter()
        logger.info("stage %s: start", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is None:
            logger.info("stage %s: done in %.2fs", self.name, time.perf_counter() - self.t0)
            return False
        if isinstance(exc, HidsError) and not getattr(exc, "failed_stage", None):
            exc.failed_stage = self.name
            exc.args = (f"stage {self.name}: {exc}",)
        return False


# ---------------------------------------------------------------------------
# preprocessing


@dataclass
class Preprocessor:
    """Everything needed to turn a parsed raw file into model inputs."""

    source_schema: list  # [(name, kind)] of the file format, ignore columns included
    raw_schema: list  # [(name, kind)] as parsed, ignore columns removed
    taxonomy: dict | None
    strict_labels: bool
    classes: list | None
    encoding: dict
    norm: dataio.NormParams
    subset: featsel.FeatureSubset

    @property
    def n_features(self):
        return len(self.subset.indices)

    def parse(self, path, require_label=True):
        schema = dataio.make_schema(self.source_schema)
        return dataio.parse_dataset(path, schema, require_label=require_label)

    def check_schema(self, raw):
        expected = [n for n, k in self.raw_schema if k != "label"]
        if raw.feature_names != expected:
            raise DataError(f"dataset columns {raw.feature_names[:5]}... do not match the "
                            f"bundle's schema ({len(expected)} feature columns)")

    def labels(self, raw, label_names):
        """Map raw labels to taxonomy categories aligned to ``label_names``."""
        ds = raw
        if self.taxonomy is not None:
            ds = dataio.map_labels(ds, dataio.AttackTaxonomy(self.taxonomy), self.strict_labels)
        return dataio.align_labels(ds, label_names)

    def features(self, raw):
        self.check_schema(raw)
        ds = dataio.encode_categoricals(raw, self.encoding["mode"], self.encoding["categories"])
        ds = dataio.apply_norm(ds, self.norm)
        return featsel.apply_subset(ds, self.subset)

    def apply(self, raw, label_names):
        """Features and aligned labels; rows outside ``classes`` are dropped."""
        ds = self.labels(raw, label_names)
        if self.classes:
            keep = [i for i, n in enumerate(ds.label_names) if n in self.classes]
            ds = ds.take(np.nonzero(np.isin(ds.labels, keep))[0])
        out = self.features(ds)
        return out.replace(labels=ds.labels, label_names=ds.label_names)


@dataclass
class PreparedData:
    train: dataio.Dataset
    test: dataio.Dataset
    preprocessor: Preprocessor
    report: dict = field(default_factory=dict)


def _load_raw(cfg, path):
    if not Path(path).exists():
        raise ConfigError(f"data file not found: {path}")
    schema = dataio.load_schema(cfg.data.schema)
    return dataio.parse_dataset(path, schema)


def _map_and_filter(cfg, raw):
    ds = raw
    if cfg.data.taxonomy:
        ds = dataio.map_labels(ds, dataio.load_taxonomy(cfg.data.taxonomy), cfg.data.strict_labels)
    if cfg.data.classes:
        ds = dataio.select_classes(ds, cfg.data.classes)
    return ds


def select_features(cfg, train):
    """Run the configured feature-selection method on a normalized training set."""
    fs = cfg.featsel
    d = train.features.shape[1]
    if fs.method == "none":
        return featsel.FeatureSubset(list(range(d)), "none", 0.0, list(train.feature_names))
    if fs.method == "corr":
        return featsel.correlation_filter(train, fs.theta)
    if fs.method == "lasso":
        return featsel.lasso_select(train, fs.lam)
    return featsel.wrapper_select(train, fs.method, max_features=fs.max_features,
                                  patience=fs.patience, seed=cfg.seed)


def prepare_data(cfg, raw_train=None, raw_test=None):
    """Parse, map labels, split, encode, normalize and select features.

    Args:
        cfg: PipelineConfig.
        raw_train: optional pre-parsed training Dataset (else ``cfg.data.train_path``).
        raw_test: optional pre-parsed test Dataset (else ``cfg.data.test_path``,
            else a split of the training file).

    Returns:
        PreparedData with encoding, scaling and subset fitted on the training part.
    """
    if raw_train is None:
        if not cfg.data.train_path:
            raise ConfigError("data.train_path is not set")
        raw_train = _load_raw(cfg, cfg.data.train_path)
    if raw_test is None and cfg.data.test_path:
        raw_test = _load_raw(cfg, cfg.data.test_path)
    full = _map_and_filter(cfg, raw_train)
    if cfg.data.subsample:
        full = dataio.subsample(full, int(cfg.data.subsample), cfg.seed, cfg.data.stratified)
    if raw_test is None:
        train_raw, test_raw = dataio.split(full, cfg.data.test_fraction, cfg.seed, cfg.data.stratified)
    else:
        train_raw, test_raw = full, raw_test
    if train_raw.n_rows == 0:
        raise DataError("training partition is empty")
    if len(train_raw.label_names) < 2:
        raise DataError("training data needs at least two classes")

    enc = dataio.encode_categoricals(train_raw, cfg.data.encoding)
    train, norm = dataio.normalize(enc, cfg.data.normalization)
    subset = select_features(cfg, train)
    train = featsel.apply_subset(train, subset)
    pre = Preprocessor(
        source_schema=raw_train.provenance.get("schema")
        or [(c.name, c.kind) for c in dataio.load_schema(cfg.data.schema)],
        raw_schema=[(c.name, c.kind) for c in train_raw.schema],
        taxonomy=(dataio.load_taxonomy(cfg.data.taxonomy).mapping if cfg.data.taxonomy else None),
        strict_labels=cfg.data.strict_labels,
        classes=sorted(cfg.data.classes) if cfg.data.classes else None,
        encoding=enc.encoding,
        norm=norm,
        subset=subset,
    )
    if raw_test is None:
        test = pre.features(test_raw).replace(labels=test_raw.labels,
                                              label_names=test_raw.label_names)
    else:
        test = pre.apply(test_raw, train.label_names)
    report = {
        "train_rows": int(train.n_rows),
        "test_rows": int(test.n_rows),
        "n_features": int(train.features.shape[1]),
        "label_names": list(train.label_names),
        "class_counts": {n: int(np.sum(train.labels == i)) for i, n in enumerate(train.label_names)},
        "malformed_rows": len(raw_train.provenance.get("malformed", [])),
        "feature_subset": subset.to_dict(),
    }
    return PreparedData(train, test, pre, report)


# ---------------------------------------------------------------------------
# model fitting


@dataclass
class Models:
    autoencoder: autoenc.Autoencoder
    latent_norm: dataio.NormParams
    anomaly: som.AnomalyModel
    dbn: dbn.DbnModel
    traces: dict = field(default_factory=dict)


def _scaled_epochs(epochs, fraction):
    if fraction is None or epochs == 0:
        return epochs
    return max(1, math.ceil(fraction * epochs))


def latent(ae, latent_norm, X):
    return dataio.transform(autoenc.encode(ae, X), latent_norm)


def fit_models(cfg, train, budget_fraction=None):
    """Train AE, SOM and DBN on a prepared training set.

    Args:
        cfg: PipelineConfig.
        train: preprocessed, labeled training Dataset.
        budget_fraction: when set, every epoch count is scaled by it (rounded
            up, at least 1 unless the configured count is 0).

    Returns:
        Models with per-stage traces.
    """
    seed = cfg.seed
    X = train.features
    k = len(train.label_names)
    traces = {}
    with _Stage("autoencoder"):
        ae = autoenc.init_autoencoder(X.shape[1], tuple(cfg.ae.hidden), cfg.ae.latent_dim,
                                      cfg.ae.activation, seed + 1)
        ae_cfg = autoenc.AeTrainConfig(cfg.ae.lr, cfg.ae.lr_decay, cfg.ae.lam,
                                       _scaled_epochs(cfg.ae.epochs, budget_fraction),
                                       cfg.ae.batch_size, seed + 2, cfg.ae.early_stop_loss)
        ae, hist = autoenc.train(ae, X, ae_cfg)
        traces["autoencoder"] = hist
        Z_raw = autoenc.encode(ae, X)
        latent_norm = dataio.fit_params(Z_raw, "minmax", [f"z{i}" for i in range(ae.latent_dim)])
        Z = dataio.transform(Z_raw, latent_norm)
    with _Stage("som"):
        sc = cfg.som
        grid = som.init_grid(sc.width, sc.height, Z.shape[1], seed + 3, tuple(sc.init_range))
        sched = som.SomSchedule(sc.eta0, sc.sigma0, sc.tau_eta, sc.tau_sigma,
                                _scaled_epochs(sc.epochs, budget_fraction), sc.neighborhood_mode)
        grid, qe_trace = som.train(grid, Z, sched, seed + 4)
        anomaly = som.fit_threshold(grid, Z, sc.threshold_percentile)
        traces["som"] = qe_trace
    with _Stage("dbn"):
        dc = cfg.dbn
        pre_cfg = dbn.TrainConfig(dc.lr, dc.lr_decay, _scaled_epochs(dc.pretrain_epochs, budget_fraction),
                                  dc.batch_size, dc.cd_steps, 0.0, seed + 5)
        rbms, layer_traces = dbn.pretrain([Z.shape[1], *dc.hidden], Z, pre_cfg)
        model = dbn.build_dbn(rbms, Z.shape[1], k, seed + 6)
        ft_cfg = dbn.TrainConfig(dc.finetune_lr, dc.lr_decay, _scaled_epochs(dc.finetune_epochs, budget_fraction),
                                 dc.batch_size, dc.cd_steps, dc.momentum, seed + 7)
        model, ft_trace = dbn.finetune(model, Z, train.labels, ft_cfg)
        traces["dbn_pretrain"] = layer_traces
        traces["dbn_finetune"] = ft_trace
    return Models(ae, latent_norm, anomaly, model, traces)


# ---------------------------------------------------------------------------
# integration and scoring


def integrate(dbn_class, dbn_conf, anomaly_flag, policy="escalate", normal="Normal"):
    """Final label for one record from the DBN class and the SOM anomaly flag.

    ``dbn_conf`` is carried for reporting only; no policy thresholds on it.
    """
    if policy == "escalate":
        if dbn_class != normal:
            return dbn_class
        return UNKNOWN_ATTACK if anomaly_flag else normal
    if policy == "dbn-only":
        return dbn_class
    if policy == "som-only":
        return UNKNOWN_ATTACK if anomaly_flag else normal
    raise ConfigError(f"unknown integration policy {policy!r}")


def integrate_ids(classes, flags, policy, normal_id, unknown_id):
    """Vectorized :func:`integrate` over class ids; ``unknown_id`` is the reserved label."""
    classes = np.asarray(classes, dtype=np.int64)
    flags = np.asarray(flags, dtype=bool)
    if policy == "dbn-only":
        return classes.copy()
    if normal_id is None:
        if policy == "som-only":
            raise ConfigError("som-only integration needs the normal class in the label map")
        return classes.copy()
    if policy == "escalate":
        return np.where((classes == normal_id) & flags, unknown_id, classes)
    if policy == "som-only":
        return np.where(flags, unknown_id, normal_id)
    raise ConfigError(f"unknown integration policy {policy!r}")


@dataclass
class Verdict:
    record_id: int
    dbn_class: str
    dbn_confidence: float
    som_qe: float
    anomaly_flag: bool
    final_label: str
    ae_error: float = 0.0


# fixed order; the autoencoder reconstruction error is a trailing diagnostic
VERDICT_COLUMNS = ("record_id", "dbn_class", "dbn_confidence", "som_qe", "anomaly_flag",
                   "final_label", "ae_reconstruction_error")


@dataclass
class Scores:
    """Per-row model outputs for a preprocessed matrix."""

    probs: np.ndarray
    dbn_class: np.ndarray
    qe: np.ndarray
    flags: np.ndarray
    final: np.ndarray  # class ids, unknown-attack = len(label_names)
    ae_error: np.ndarray


@dataclass
class TrainedBundle:
    preprocessor: Preprocessor
    autoencoder: autoenc.Autoencoder
    latent_norm: dataio.NormParams
    anomaly: som.AnomalyModel
    dbn: dbn.DbnModel
    label_names: list
    normal_label: str
    policy: str
    config: dict
    version: tuple = (FORMAT_MAJOR, FORMAT_MINOR)

    @property
    def output_names(self):
        return list(self.label_names) + [UNKNOWN_ATTACK]

    @property
    def normal_id(self):
        return self.label_names.index(self.normal_label) if self.normal_label in self.label_names else None

    def check_chain(self):
        """Selected features feed the AE; the latent width feeds both SOM and DBN."""
        if self.preprocessor.n_features != self.autoencoder.input_dim:
            raise DataError("feature subset size does not match the autoencoder input")
        if self.anomaly.grid.dim != self.autoencoder.latent_dim:
            raise DataError("SOM dimension does not match the autoencoder latent width")
        if self.dbn.n_inputs != self.autoencoder.latent_dim:
            raise DataError("DBN input width does not match the autoencoder latent width")
        if self.dbn.n_classes != len(self.label_names):
            raise DataError("DBN output width does not match the label map")
        return self


def score_matrix(bundle, X):
    """Model outputs for preprocessed features ``X``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != bundle.autoencoder.input_dim:
        raise DataError(f"input has {X.shape[-1]} features, bundle expects "
                        f"{bundle.autoencoder.input_dim}")
    Z_raw = autoenc.encode(bundle.autoencoder, X)
    ae_error = np.sum((X - autoenc.decode(bundle.autoencoder, Z_raw)) ** 2, axis=1)
    Z = dataio.transform(Z_raw, bundle.latent_norm)
    probs = dbn.predict(bundle.dbn, Z)
    cls = np.argmax(probs, axis=1)
    flags, qe = som.anomaly_flags(bundle.anomaly, Z)
    final = integrate_ids(cls, flags, bundle.policy, bundle.normal_id, len(bundle.label_names))
    return Scores(probs, cls, qe, flags, final, ae_error)


def verdicts(bundle, scores):
    names = bundle.output_names
    rows = zip(scores.dbn_class, scores.probs, scores.qe, scores.flags, scores.final, scores.ae_error)
    return [Verdict(i, names[c], float(p[c]), float(q), bool(f), names[fl], float(e))
            for i, (c, p, q, f, fl, e) in enumerate(rows)]


def score(bundle, raw):
    """Verdicts for every row of a parsed raw dataset (labels are ignored)."""
    if raw.n_rows == 0:
        raise DataError("no rows to score")
    return verdicts(bundle, score_matrix(bundle, bundle.preprocessor.features(raw).features))


def write_verdicts_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(VERDICT_COLUMNS)
        for v in rows:
            w.writerow([v.record_id, v.dbn_class, repr(v.dbn_confidence), repr(v.som_qe),
                        int(v.anomaly_flag), v.final_label, repr(v.ae_error)])


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Evaluation:
    report: metrics.MetricsReport
    scores: Scores
    labels: np.ndarray
    class_names: list  # label map + unknown-attack + classes unseen in training
    attack_scores: np.ndarray | None
    attack_truth: np.ndarray | None


def evaluate_prepared(bundle, test):
    """Metrics on an already preprocessed test set whose labels are aligned to the bundle."""
    if test.n_rows == 0:
        raise DataError("cannot evaluate on an empty test set")
    k = len(bundle.label_names)
    sc = score_matrix(bundle, test.features)
    unseen = list(test.label_names[k:])
    names = bundle.output_names + unseen
    # test ids >= k are classes unseen in training; shift them past unknown-attack
    labels = np.where(test.labels >= k, test.labels + 1, test.labels)
    null = [k] + list(range(k + 1, k + 1 + len(unseen)))
    report = metrics.multiclass_report(sc.final, labels, len(names), names, null_classes=null)
    nid = bundle.normal_id
    attack_scores = attack_truth = None
    if nid is not None:
        attack_truth = (labels != nid).astype(np.int64)
        attack_pred = (sc.final != nid).astype(np.int64)
        attack_scores = 1.0 - sc.probs[:, nid]
        binary = metrics.basic_metrics(metrics.confusion(attack_pred, attack_truth, 1))
        binary["auc_roc"] = metrics.auc_roc(attack_scores, attack_truth)
        report.binary = binary
        report.auc_roc = binary["auc_roc"]
    return Evaluation(report, sc, labels, names, attack_scores, attack_truth)


def evaluate(bundle, raw_test):
    """Apply the bundle's preprocessing and models to a parsed raw test file."""
    if raw_test.n_rows == 0:
        raise DataError("cannot evaluate on an empty test set")
    if not raw_test.is_labeled:
        raise DataError("evaluation needs a labeled test set")
    test = bundle.preprocessor.apply(raw_test, bundle.label_names)
    return evaluate_prepared(bundle, test)


# ---------------------------------------------------------------------------
# training entry point


@dataclass
class TrainingResult:
    bundle: TrainedBundle
    evaluation: Evaluation
    train_evaluation: Evaluation
    prepared: PreparedData
    traces: dict
    reports: dict
    search: object | None = None


def _bundle(cfg, prepared, models):
    return TrainedBundle(
        preprocessor=prepared.preprocessor,
        autoencoder=models.autoencoder,
        latent_norm=models.latent_norm,
        anomaly=models.anomaly,
        dbn=models.dbn,
        label_names=list(prepared.train.label_names),
        normal_label=cfg.normal_label,
        policy=cfg.integration,
        config=cfg.to_dict(),
    ).check_chain()


def run_training(cfg, raw_train=None, raw_test=None, out_dir=None):
    """Preprocess, optionally search hyperparameters, train every stage, evaluate.

    When ``out_dir`` is given each stage's artifacts are written as soon as
    the stage finishes, so a later failure leaves earlier outputs in place.
    """
    cfg = copy.deepcopy(cfg).validate()
    writer = _ArtifactWriter(out_dir)
    with _Stage("preprocess"):
        prepared = prepare_data(cfg, raw_train, raw_test)
        writer.prepare(prepared)
    if cfg.normal_label not in prepared.train.label_names:
        if cfg.integration == "som-only":
            raise ConfigError(f"normal label {cfg.normal_label!r} missing from training classes")
        logger.warning("normal label %r not among training classes; anomaly escalation is inert",
                       cfg.normal_label)
    search = None
    if cfg.pso.enabled:
        with _Stage("pso"):
            search = optimize_pipeline(cfg, prepared.train)
            cfg = search.best_config
            writer.search(search)
    models = fit_models(cfg, prepared.train)
    writer.models(models)
    bundle = _bundle(cfg, prepared, models)
    with _Stage("evaluate"):
        ev = evaluate_prepared(bundle, prepared.test)
        train_ev = evaluate_prepared(bundle, prepared.train)
        writer.evaluation(ev)
    reports = {
        "preprocess": prepared.report,
        "autoencoder": {"final_loss": models.traces["autoencoder"]["loss"][-1],
                        "epochs": len(models.traces["autoencoder"]["loss"]) - 1,
                        "latent_dim": bundle.autoencoder.latent_dim},
        "som": {"threshold": bundle.anomaly.threshold,
                "threshold_percentile": bundle.anomaly.threshold_percentile,
                "final_mean_qe": models.traces["som"][-1]},
        "dbn": {"layer_sizes": list(bundle.dbn.layer_sizes),
                "final_loss": (models.traces["dbn_finetune"] or [None])[-1]},
        "evaluation": ev.report.to_dict(),
        "train_accuracy": train_ev.report.accuracy,
    }
    if search is not None:
        reports["pso"] = search.summary()
    return TrainingResult(bundle, ev, train_ev, prepared, models.traces, reports, search)


class _ArtifactWriter:
    """Persists per-stage artifacts under a run directory (no-op without one)."""

    def __init__(self, out_dir):
        self.out = Path(out_dir) if out_dir is not None else None
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)

    def _json(self, name, obj):
        (self.out / name).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def prepare(self, prepared):
        if self.out is None:
            return
        self._json("preprocess.json", prepared.report)
        self._json("feature_subset.json", prepared.preprocessor.subset.to_dict())

    def search(self, search):
        if self.out is None:
            return
        write_trace_csv(self.out / "pso_trace.csv", ("iteration", "best_fitness", "mean_fitness"),
                        search.trace)
        self._json("pso.json", search.summary())
        search.best_config.validate()
        (self.out / "best_config.json").write_text(
            json.dumps(search.best_config.to_dict(), indent=2, sort_keys=True) + "\n")

    def models(self, models):
        if self.out is None:
            return
        hist = models.traces["autoencoder"]
        write_trace_csv(self.out / "ae_loss.csv", ("epoch", "loss", "reconstruction", "encoder_norm"),
                        [(i, a, b, c) for i, (a, b, c) in
                         enumerate(zip(hist["loss"], hist["reconstruction"], hist["encoder_norm"]))])
        write_trace_csv(self.out / "som_qe.csv", ("epoch", "mean_qe"), list(enumerate(models.traces["som"])))
        rows = [(layer, e + 1, v) for layer, tr in enumerate(models.traces["dbn_pretrain"])
                for e, v in enumerate(tr)]
        write_trace_csv(self.out / "dbn_pretrain.csv", ("layer", "epoch", "recon_error"), rows)
        write_trace_csv(self.out / "dbn_finetune.csv", ("epoch", "cross_entropy"),
                        [(e + 1, v) for e, v in enumerate(models.traces["dbn_finetune"])])
        grid = models.anomaly.grid
        som.write_grid_csv(self.out / "u_matrix.csv", som.u_matrix(grid))

    def evaluation(self, ev):
        if self.out is None:
            return
        write_evaluation(self.out, ev)


def write_trace_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def write_evaluation(out_dir, ev):
    """metrics.json, per-class CSV, confusion CSV and (when defined) ROC CSV."""
    out = Path(out_dir)
    (out / "metrics.json").write_text(ev.report.to_json() + "\n")
    ev.report.write_csv(out / "metrics.csv")
    metrics.write_confusion_csv(out / "confusion.csv", ev.report.confusion, ev.class_names)
    if ev.attack_truth is not None and 0 < ev.attack_truth.sum() < len(ev.attack_truth):
        metrics.write_roc_csv(out / "roc.csv", ev.attack_scores, ev.attack_truth)


# ---------------------------------------------------------------------------
# hyperparameter search


def build_space(dims):
    """SearchSpace from config dictionaries (``type``, ``lo``/``hi`` or ``options``, ``targets``)."""
    out = []
    for d in dims:
        kind = d.get("type")
        targets = tuple(d.get("targets", ()))
        if not targets:
            raise ConfigError(f"search dimension {d.get('name')!r} has no targets")
        if kind == "continuous":
            out.append(pso.Continuous(d["name"], float(d["lo"]), float(d["hi"]), targets))
        elif kind == "integer":
            out.append(pso.Integer(d["name"], int(d["lo"]), int(d["hi"]), targets))
        elif kind == "categorical":
            out.append(pso.Categorical(d["name"], tuple(d["options"]), targets))
        else:
            raise ConfigError(f"search dimension {d.get('name')!r}: unknown type {kind!r}")
    return pso.SearchSpace(out)


def _widths(first, n_layers):
    # widths halve layer by layer from the searched first-layer width
    return [max(1, int(first) // (2 ** i)) for i in range(n_layers)]


def apply_params(cfg, space, params):
    """Config copy with every searched value written to its target paths."""
    data = cfg.to_dict()
    for dim in space.dims:
        value = params[dim.name]
        for target in dim.targets:
            current = get_path(data, target)
            if isinstance(current, list) and not isinstance(value, list):
                set_path(data, target, _widths(value, len(current)))
            else:
                set_path(data, target, value)
    return from_dict(data)


def default_position(cfg, space):
    """The current config expressed as a search-space position."""
    data = cfg.to_dict()
    lo, hi = space.bounds()
    values = {}
    for dim in space.dims:
        v = get_path(data, dim.targets[0])
        if isinstance(v, list):
            v = v[0]
        if isinstance(dim, pso.Categorical):
            v = v if v in dim.options else dim.options[0]
        values[dim.name] = v
    return np.clip(space.encode(values), lo, hi)


def _weighted(report, weights):
    wa, wp, wr = weights
    return wa * (report.accuracy or 0.0) + wp * (report.precision or 0.0) + wr * (report.recall or 0.0)


def pipeline_fitness(cfg, data, weights=None, diagnostics=None):
    """Reduced-budget train/validate run of a candidate config; lower is better.

    Returns ``-(w_a*acc + w_p*prec + w_r*rec)`` on a stratified validation
    split of ``data`` (macro precision and recall), or ``+inf`` if training
    fails. The composite reconstruction/clustering/classification cost is
    logged and, when ``diagnostics`` is a list, appended to it.
    """
    weights = tuple(weights or cfg.pso.fitness_weights)
    try:
        tr, va = dataio.split(data, cfg.pso.val_fraction, cfg.seed + 100, stratified=True)
        if va.n_rows == 0:
            raise DataError("validation split is empty")
        models = fit_models(cfg, tr, budget_fraction=cfg.pso.budget_fraction)
        bundle = TrainedBundle(None, models.autoencoder, models.latent_norm, models.anomaly,
                               models.dbn, list(tr.label_names), cfg.normal_label,
                               cfg.integration, {})
        report = evaluate_prepared(bundle, va).report
        Z = latent(models.autoencoder, models.latent_norm, va.features)
        l_rec = autoenc.reconstruction_loss(models.autoencoder, va.features)
        l_clus = float(som.quantization_errors(models.anomaly.grid, Z).mean())
        l_hier = dbn.cross_entropy(dbn.predict(models.dbn, Z), dbn.one_hot(va.labels, len(tr.label_names)))
        cost = pso.composite_cost(l_rec, l_clus, l_hier, pso.CompositeCostWeights(*cfg.pso.cost_weights))
        value = -_weighted(report, weights)
        logger.info("fitness %.6f  composite cost %.6f (rec %.4g, clus %.4g, hier %.4g)",
                    value, cost, l_rec, l_clus, l_hier)
        if diagnostics is not None:
            diagnostics.append({"fitness": value, "composite_cost": cost,
                                "l_rec": l_rec, "l_clus": l_clus, "l_hier": l_hier})
        return value
    except (HidsError, FloatingPointError, ValueError) as exc:
        logger.warning("candidate failed (%s); fitness +inf", exc)
        if diagnostics is not None:
            diagnostics.append({"fitness": math.inf, "error": str(exc)})
        return math.inf


@dataclass
class SearchResult:
    """Outcome of :func:`optimize_pipeline`.

    ``default_fitness`` is the fitness of the seeded particle, i.e. the base
    config projected onto the search space; searched values outside the
    space's bounds are clipped first, so it can differ from the base config.
    """

    best_config: PipelineConfig
    best_fitness: float
    best_params: dict | None
    default_fitness: float | None
    trace: list

    def summary(self):
        return {"best_fitness": self.best_fitness, "default_fitness": self.default_fitness,
                "best_params": self.best_params, "iterations": len(self.trace)}


def optimize_pipeline(cfg, data, n_particles=None, n_iters=None, n_jobs=None):
    """PSO over ``cfg.pso.space`` with the current config seeded as particle 0.

    Args:
        cfg: base PipelineConfig; non-searched settings are kept.
        data: preprocessed labeled training Dataset.
        n_particles, n_iters: budget (defaults from ``cfg.pso``).

    Returns:
        SearchResult whose ``best_config`` is a complete runnable config.
    """
    n_particles = cfg.pso.n_particles if n_particles is None else n_particles
    n_iters = cfg.pso.n_iters if n_iters is None else n_iters
    if n_particles < 0 or n_iters < 0:
        raise ConfigError("PSO budget must be non-negative")
    if n_particles == 0 or n_iters == 0:
        logger.warning("zero PSO budget; returning the default configuration")
        return SearchResult(copy.deepcopy(cfg), math.nan, None, None, [])
    space = build_space(cfg.pso.space)
    cache = {}

    def fitness(params):
        key = json.dumps(params, sort_keys=True)
        if key not in cache:
            try:
                candidate = apply_params(cfg, space, params)
            except ConfigError as exc:
                logger.warning("candidate %s rejected: %s", params, exc)
                return math.inf
            cache[key] = pipeline_fitness(candidate, data)
        return cache[key]

    start = default_position(cfg, space)
    result = pso.optimize(space, fitness, n_particles, n_iters, cfg.seed, cfg.pso.omega,
                          cfg.pso.c1, cfg.pso.c2, initial_positions=start[None, :], n_jobs=n_jobs)
    default_fit = cache.get(json.dumps(space.decode(start), sort_keys=True))
    best = apply_params(cfg, space, result.best_params)
    best.pso.enabled = False
    return SearchResult(best, result.best_fitness, result.best_params, default_fit, result.trace)


# ---------------------------------------------------------------------------
# bundle container


def _arrays(bundle):
    out = {}
    for i, (W, b) in enumerate(bundle.autoencoder.encoder):
        out[f"ae.enc.{i}.W"], out[f"ae.enc.{i}.b"] = W, b
    for i, (W, b) in enumerate(bundle.autoencoder.decoder):
        out[f"ae.dec.{i}.W"], out[f"ae.dec.{i}.b"] = W, b
    out["som.weights"] = bundle.anomaly.grid.weights
    for i, r in enumerate(bundle.dbn.rbm_layers):
        out[f"dbn.rbm.{i}.W"], out[f"dbn.rbm.{i}.b"], out[f"dbn.rbm.{i}.c"] = r.W, r.b, r.c
    out["dbn.W_out"], out["dbn.b_out"] = bundle.dbn.W_out, bundle.dbn.b_out
    return out


def _meta(bundle):
    p = bundle.preprocessor
    return {
        "preprocessor": {
            "source_schema": [list(c) for c in p.source_schema],
            "raw_schema": [list(c) for c in p.raw_schema],
            "taxonomy": p.taxonomy,
            "strict_labels": p.strict_labels,
            "classes": p.classes,
            "encoding": p.encoding,
            "norm": p.norm.to_dict(),
            "subset": p.subset.to_dict(),
        },
        "autoencoder": {"activation": bundle.autoencoder.activation,
                        "n_encoder": len(bundle.autoencoder.encoder),
                        "n_decoder": len(bundle.autoencoder.decoder)},
        "latent_norm": bundle.latent_norm.to_dict(),
        "som": {"width": bundle.anomaly.grid.width, "height": bundle.anomaly.grid.height,
                "threshold": bundle.anomaly.threshold,
                "threshold_percentile": bundle.anomaly.threshold_percentile},
        "dbn": {"n_rbm": len(bundle.dbn.rbm_layers), "layer_sizes": list(bundle.dbn.layer_sizes)},
        "label_names": list(bundle.label_names),
        "normal_label": bundle.normal_label,
        "policy": bundle.policy,
        "config": bundle.config,
    }


def bundle_bytes(bundle, timestamp=None):
    """Serialize a bundle.

    Layout: header (magic, major, minor, float64 timestamp, meta length),
    sorted-key JSON metadata with an array table, raw little-endian float64
    array data, then a SHA-256 of everything before it with the timestamp
    bytes zeroed, so identical models differ only in the timestamp field.
    """
    arrays = _arrays(bundle)
    table, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        table.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        blobs.append(a.tobytes())
        offset += a.nbytes
    meta = _meta(bundle)
    meta["arrays"] = table
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    ts = time.time() if timestamp is None else float(timestamp)
    header = _HEADER.pack(MAGIC, FORMAT_MAJOR, FORMAT_MINOR, ts, len(meta_bytes))
    body = header + meta_bytes + b"".join(blobs)
    return body + _digest(body)


def _digest(body):
    h = hashlib.sha256()
    h.update(body[:_TIMESTAMP_SLICE.start])
    h.update(b"\0" * (_TIMESTAMP_SLICE.stop - _TIMESTAMP_SLICE.start))
    h.update(body[_TIMESTAMP_SLICE.stop:])
    return h.digest()


def save_bundle(bundle, path, timestamp=None):
    """Write a bundle; returns its hex checksum (timestamp-independent)."""
    data = bundle_bytes(bundle, timestamp)
    Path(path).write_bytes(data)
    return data[-32:].hex()


def bundle_from_bytes(data):
    if len(data) < _HEADER.size or data[:4] != MAGIC:
        if data[:4] != MAGIC and len(data) >= 4:
            raise BundleError("not a model bundle (bad magic bytes)")
        raise BundleError("checksum failure: bundle is truncated")
    magic, major, minor, ts, meta_len = _HEADER.unpack_from(data)
    if major > FORMAT_MAJOR:
        raise BundleError(f"bundle format version {major}.{minor} is newer than this reader "
                          f"({FORMAT_MAJOR}.{FORMAT_MINOR}); refusing to load")
    if len(data) < _HEADER.size + 32 or _digest(data[:-32]) != data[-32:]:
        raise BundleError("checksum failure: bundle is corrupt or truncated")
    meta_end = _HEADER.size + meta_len
    meta = json.loads(data[_HEADER.size:meta_end])
    blob = data[meta_end:-32]
    arrays = {}
    for entry in meta["arrays"]:
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
    p = meta["preprocessor"]
    pre = Preprocessor(
        source_schema=[tuple(c) for c in p["source_schema"]],
        raw_schema=[tuple(c) for c in p["raw_schema"]],
        taxonomy=p["taxonomy"],
        strict_labels=p["strict_labels"],
        classes=p["classes"],
        encoding=p["encoding"],
        norm=dataio.NormParams.from_dict(p["norm"]),
        subset=featsel.FeatureSubset.from_dict(p["subset"]),
    )
    am = meta["autoencoder"]
    ae = autoenc.Autoencoder(
        [(arrays[f"ae.enc.{i}.W"], arrays[f"ae.enc.{i}.b"]) for i in range(am["n_encoder"])],
        [(arrays[f"ae.dec.{i}.W"], arrays[f"ae.dec.{i}.b"]) for i in range(am["n_decoder"])],
        am["activation"])
    sm = meta["som"]
    grid = som.SomGrid(sm["width"], sm["height"], arrays["som.weights"])
    anomaly = som.AnomalyModel(grid, sm["threshold"], sm["threshold_percentile"])
    rbms = [dbn.Rbm(arrays[f"dbn.rbm.{i}.W"], arrays[f"dbn.rbm.{i}.b"], arrays[f"dbn.rbm.{i}.c"])
            for i in range(meta["dbn"]["n_rbm"])]
    model = dbn.DbnModel(rbms, arrays["dbn.W_out"], arrays["dbn.b_out"], meta["dbn"]["layer_sizes"])
    return TrainedBundle(pre, ae, dataio.NormParams.from_dict(meta["latent_norm"]), anomaly, model,
                         meta["label_names"], meta["normal_label"], meta["policy"], meta["config"],
                         (major, minor)).check_chain()


def load_bundle(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"bundle not found: {path}")
    return bundle_from_bytes(path.read_bytes())


def bundle_timestamp(data):
    return struct.unpack_from("<d", data, _TIMESTAMP_SLICE.start)[0]
