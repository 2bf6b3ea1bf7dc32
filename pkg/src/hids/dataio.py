"""Dataset ingestion: CSV parsing, categorical encoding, normalization, splits.

Raw flow records are parsed against a column schema into a :class:`Dataset`
whose ``features`` matrix is always numeric. Categorical columns are interned
as integer codes (lexicographic vocabulary) until :func:`encode_categoricals`
expands or re-codes them.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, IngestError

logger = logging.getLogger(__name__)

KINDS = ("numeric", "categorical", "label", "ignore")
BUNDLED_SCHEMAS = (
    "nsl_kdd",
    "nsl_kdd_difficulty",
    "unsw_nb15",
    "unsw_nb15_id",
    "ciciot2023",
    "ciciot2023_ts",
)

NSL_KDD_CATEGORIES = ("DoS", "R2L", "U2R", "Probe", "Normal")
UNSW_NB15_CATEGORIES = (
    "Exploits", "Fuzzers", "Backdoor", "DoS", "Worms", "Analysis", "Reconnaissance", "Normal",
)

# (category, attack, rows) per attack class in the full CICIoT2023 release.
CICIOT2023_ATTACK_ROWS = (
    ("Benign", "Benign Traffic", 1_098_195),
    ("DDoS", "ACK Fragmentation", 285_104),
    ("DDoS", "UDP Flood", 5_412_287),
    ("DDoS", "SlowLoris", 23_426),
    ("DDoS", "ICMP Flood", 7_200_504),
    ("DDoS", "RSTFIN Flood", 4_045_285),
    ("DDoS", "PSHACK Flood", 4_094_755),
    ("DDoS", "HTTP Flood", 28_790),
    ("DDoS", "UDP Fragmentation", 286_925),
    ("DDoS", "ICMP Fragmentation", 452_489),
    ("DDoS", "TCP Flood", 4_497_667),
    ("DDoS", "SYN Flood", 4_059_190),
    ("DDoS", "SynonymousIP Flood", 3_598_138),
    ("DoS", "TCP Flood", 2_671_445),
    ("DoS", "HTTP Flood", 71_864),
    ("DoS", "SYN Flood", 2_028_834),
    ("DoS", "UDP Flood", 3_318_595),
    ("Recon", "Ping Sweep", 2_262),
    ("Recon", "OS Scan", 98_259),
    ("Recon", "Vulnerability Scan", 37_382),
    ("Recon", "Port Scan", 82_284),
    ("Recon", "Host Discovery", 134_378),
    ("Web-Based", "SQL Injection", 5_245),
    ("Web-Based", "Command Injection", 5_409),
    ("Web-Based", "Backdoor Malware", 3_218),
    ("Web-Based", "Uploading Attack", 1_252),
    ("Web-Based", "XSS", 3_846),
    ("Web-Based", "Browser Hijacking", 5_859),
    ("Brute Force", "Dictionary Brute Force", 13_064),
    ("Spoofing", "ARP Spoofing", 307_593),
    ("Spoofing", "DNS Spoofing", 178_911),
    ("Mirai", "GREIP Flood", 751_682),
    ("Mirai", "Greeth Flood", 991_866),
    ("Mirai", "UDPPlain", 890_576),
)


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    kind: str
    index: int


def validate_schema(schema):
    kinds = [c.kind for c in schema]
    bad = [k for k in kinds if k not in KINDS]
    if bad:
        raise ConfigError(f"unknown column kind(s): {sorted(set(bad))}")
    if kinds.count("label") != 1:
        raise ConfigError(f"schema must have exactly one label column, found {kinds.count('label')}")
    if [c.index for c in schema] != list(range(len(schema))):
        raise ConfigError("schema indices must be unique and contiguous from 0")
    names = [c.name for c in schema if c.kind != "ignore"]
    if len(set(names)) != len(names):
        raise ConfigError("schema column names must be unique")


def make_schema(columns):
    """Build a schema from ``(name, kind)`` pairs, assigning indices in order."""
    schema = [ColumnSchema(name, kind, i) for i, (name, kind) in enumerate(columns)]
    validate_schema(schema)
    return schema


def load_schema(name_or_path):
    """Load a bundled schema by id (e.g. ``"nsl_kdd"``) or a ``name,kind`` CSV file."""
    if name_or_path in BUNDLED_SCHEMAS:
        text = resources.files("hids.data.schemas").joinpath(f"{name_or_path}.csv").read_text()
    else:
        path = Path(name_or_path)
        if not path.exists():
            raise ConfigError(f"unknown schema {name_or_path!r}")
        text = path.read_text()
    rows = list(csv.reader(text.splitlines()))
    if rows and rows[0] == ["name", "kind"]:
        rows = rows[1:]
    return make_schema((r[0].strip(), r[1].strip()) for r in rows if r)


@dataclass
class NormParams:
    method: str
    columns: list
    min: np.ndarray
    max: np.ndarray
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def to_dict(self):
        def arr(a):
            return None if a is None else [float(v) for v in a]

        return {
            "method": self.method,
            "columns": list(self.columns),
            "min": arr(self.min),
            "max": arr(self.max),
            "mean": arr(self.mean),
            "std": arr(self.std),
        }

    @classmethod
    def from_dict(cls, d):
        def arr(a):
            return None if a is None else np.asarray(a, dtype=np.float64)

        return cls(d["method"], list(d["columns"]), arr(d["min"]), arr(d["max"]),
                   arr(d.get("mean")), arr(d.get("std")))


@dataclass
class AttackTaxonomy:
    mapping: dict

    @property
    def categories(self):
        return sorted(set(self.mapping.values()))

    @classmethod
    def identity(cls, labels):
        return cls({name: name for name in labels})


def load_taxonomy(name_or_path):
    """Load a bundled taxonomy by id or a two-column ``raw_label,category`` CSV."""
    bundled = ("nsl_kdd", "unsw_nb15", "ciciot2023")
    if name_or_path in bundled:
        text = resources.files("hids.data.taxonomies").joinpath(f"{name_or_path}.csv").read_text()
    else:
        path = Path(name_or_path)
        if not path.exists():
            raise ConfigError(f"unknown taxonomy {name_or_path!r}")
        text = path.read_text()
    mapping = {}
    for row in csv.reader(text.splitlines()):
        if not row or row == ["raw_label", "category"]:
            continue
        raw, cat = row[0].strip(), row[1].strip()
        if raw in mapping and mapping[raw] != cat:
            raise ConfigError(f"taxonomy maps {raw!r} to both {mapping[raw]!r} and {cat!r}")
        mapping[raw] = cat
    return AttackTaxonomy(mapping)


@dataclass
class Dataset:
    """Numeric feature matrix plus integer labels.

    ``schema`` lists the feature columns in matrix order followed by the label
    column. ``categories`` holds the vocabulary of every categorical column
    that is still interned as integer codes.
    """

    schema: list
    features: np.ndarray
    labels: np.ndarray
    label_names: list
    norm_params: NormParams | None = None
    categories: dict = field(default_factory=dict)
    encoding: dict | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataError("features must be a 2-D matrix")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DataError("features row count does not match labels length")

    @property
    def n_rows(self):
        return self.features.shape[0]

    @property
    def feature_columns(self):
        return [c for c in self.schema if c.kind != "label"]

    @property
    def feature_names(self):
        return [c.name for c in self.feature_columns]

    @property
    def label_column(self):
        return next(c for c in self.schema if c.kind == "label")

    @property
    def is_labeled(self):
        return bool(self.n_rows == 0 or self.labels.min() >= 0)

    def label_strings(self):
        return [self.label_names[i] for i in self.labels]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def take(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return self.replace(features=self.features[rows], labels=self.labels[rows])

    def with_features(self, features, names):
        schema = _feature_schema(names, self.label_column.name)
        return self.replace(features=features, schema=schema, categories={})


def _feature_schema(names, label_name):
    cols = [(n, "numeric") for n in names] + [(label_name, "label")]
    return make_schema(cols)


def _norm_token(s):
    return "".join(ch for ch in s.lower() if ch.isalnum())


def _is_float(s):
    try:
        float(s)
    except ValueError:
        return False
    return True


def _looks_like_header(row, schema):
    if len(row) != len(schema):
        return False
    if [_norm_token(v) for v in row] == [_norm_token(c.name) for c in schema]:
        return True
    numeric = [v for v, c in zip(row, schema) if c.kind == "numeric"]
    if numeric and not any(_is_float(v) for v in numeric):
        logger.warning("first row is non-numeric but does not match schema names; treating as header")
        return True
    return False


def parse_dataset(path, schema, *, strict=False, known_labels=None, on_error="skip",
                  require_label=True):
    """Parse a comma-separated flow file into a :class:`Dataset`.

    Args:
        path: CSV file. A header row is detected when the first row is
            non-numeric and matches the schema names.
        schema: list of :class:`ColumnSchema` (or a bundled schema id).
        strict: when True, a raw label outside ``known_labels`` is fatal.
        known_labels: iterable of accepted raw labels, used with ``strict``.
        on_error: ``"skip"`` records malformed rows in the provenance and
            drops them; ``"raise"`` aborts on the first one.
        require_label: when False, rows lacking the label field are accepted
            and receive label ``-1``.

    Returns:
        Dataset with categorical columns interned as lexicographic codes.
    """
    if isinstance(schema, str):
        schema = load_schema(schema)
    validate_schema(schema)
    path = Path(path)
    if not path.exists():
        raise IngestError(f"file not found: {path}")
    if on_error not in ("skip", "raise"):
        raise ConfigError(f"on_error must be 'skip' or 'raise', got {on_error!r}")

    label_pos = next(c.index for c in schema if c.kind == "label")
    kept = [c for c in schema if c.kind in ("numeric", "categorical")]
    n_cols = len(schema)

    numeric_rows, cat_rows, raw_labels, malformed = [], [], [], []
    header_checked = False
    has_content = False
    with path.open(newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not v.strip() for v in row):
                continue
            has_content = True
            row = [v.strip() for v in row]
            if not header_checked:
                header_checked = True
                if _looks_like_header(row, schema):
                    continue
            if not require_label and len(row) == n_cols - 1:
                row = row[:label_pos] + [None] + row[label_pos:]
            if len(row) != n_cols:
                msg = f"expected {n_cols} fields, found {len(row)}"
                if on_error == "raise":
                    raise IngestError(msg, line=line_no)
                malformed.append((line_no, msg))
                continue
            try:
                values = []
                for c in kept:
                    if c.kind == "numeric":
                        v = float(row[c.index])
                        if not math.isfinite(v):
                            raise ValueError(f"non-finite value in column {c.name!r}")
                        values.append(v)
            except ValueError as exc:
                msg = str(exc) if "non-finite" in str(exc) else f"non-numeric value ({exc})"
                if on_error == "raise":
                    raise IngestError(msg, line=line_no) from None
                malformed.append((line_no, msg))
                continue
            numeric_rows.append(values)
            cat_rows.append([row[c.index] for c in kept if c.kind == "categorical"])
            raw_labels.append(row[label_pos])

    if not has_content:
        raise IngestError(f"empty file: {path}")
    if not numeric_rows:
        raise IngestError(f"no valid rows in {path} ({len(malformed)} malformed)")
    if malformed:
        logger.warning("%s: skipped %d malformed row(s), first at line %d",
                       path, len(malformed), malformed[0][0])

    if strict and known_labels is not None:
        known = set(known_labels)
        unknown = sorted({l for l in raw_labels if l is not None and l not in known})
        if unknown:
            raise IngestError(f"unknown label(s) under strict mode: {unknown}")

    n = len(numeric_rows)
    features = np.empty((n, len(kept)), dtype=np.float64)
    categories = {}
    num_i = cat_i = 0
    num_block = np.asarray(numeric_rows, dtype=np.float64).reshape(n, -1)
    for j, c in enumerate(kept):
        if c.kind == "numeric":
            features[:, j] = num_block[:, num_i]
            num_i += 1
        else:
            col = [r[cat_i] for r in cat_rows]
            vocab = sorted(set(col))
            lookup = {v: k for k, v in enumerate(vocab)}
            features[:, j] = [lookup[v] for v in col]
            categories[c.name] = vocab
            cat_i += 1

    present = sorted({l for l in raw_labels if l is not None})
    lookup = {v: k for k, v in enumerate(present)}
    labels = np.array([lookup[l] if l is not None else -1 for l in raw_labels], dtype=np.int64)

    label_col = schema[label_pos]
    new_schema = make_schema([(c.name, c.kind) for c in kept] + [(label_col.name, "label")])
    return Dataset(
        schema=new_schema,
        features=features,
        labels=labels,
        label_names=present,
        categories=categories,
        provenance={"source": str(path), "rows": n, "malformed": malformed,
                    "schema": [(c.name, c.kind) for c in schema]},
    )


def encode_categoricals(ds, mode="onehot", categories=None):
    """Replace interned categorical columns with numeric encodings.

    ``onehot`` expands a k-valued column into k binary ``col=value`` columns
    (lexicographic order); ``label`` keeps the lexicographic integer code.
    Passing the training ``categories`` re-codes a test set against the
    training vocabulary: unseen values become an all-zero one-hot vector or
    the reserved code ``len(vocab)``, with a warning.
    """
    if mode not in ("onehot", "label"):
        raise ConfigError(f"encoding mode must be 'onehot' or 'label', got {mode!r}")
    vocabs = dict(ds.categories if categories is None else categories)
    blocks, names = [], []
    for j, col in enumerate(ds.feature_columns):
        x = ds.features[:, j]
        if col.kind != "categorical":
            blocks.append(x[:, None])
            names.append(col.name)
            continue
        if col.name not in vocabs:
            raise DataError(f"no vocabulary for categorical column {col.name!r}")
        vocab = list(vocabs[col.name])
        own = ds.categories.get(col.name, vocab)
        lookup = {v: k for k, v in enumerate(vocab)}
        mapped = np.array([lookup.get(v, -1) for v in own], dtype=np.int64)
        codes = mapped[x.astype(np.int64)]
        n_unseen = int((codes < 0).sum())
        if n_unseen:
            logger.warning("column %r: %d value(s) unseen in training vocabulary", col.name, n_unseen)
        if mode == "onehot":
            block = np.zeros((ds.n_rows, len(vocab)))
            ok = codes >= 0
            block[np.nonzero(ok)[0], codes[ok]] = 1.0
            blocks.append(block)
            names.extend(f"{col.name}={v}" for v in vocab)
        else:
            blocks.append(np.where(codes < 0, len(vocab), codes).astype(np.float64)[:, None])
            names.append(col.name)
    features = np.hstack(blocks) if blocks else np.empty((ds.n_rows, 0))
    used = {c.name: list(vocabs[c.name]) for c in ds.feature_columns if c.kind == "categorical"}
    out = ds.with_features(features, names)
    return out.replace(encoding={"mode": mode, "categories": used})


def fit_params(x, method, columns):
    if method == "minmax":
        return NormParams("minmax", columns, x.min(axis=0), x.max(axis=0))
    if method == "zscore":
        return NormParams("zscore", columns, x.min(axis=0), x.max(axis=0),
                          x.mean(axis=0), x.std(axis=0))
    raise ConfigError(f"normalization method must be 'minmax' or 'zscore', got {method!r}")


def transform(x, p):
    """Apply stored normalization parameters to a raw matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] != len(p.min):
        raise DataError(f"column count {x.shape[1]} does not match params ({len(p.min)})")
    if p.method == "minmax":
        lo, span = p.min, p.max - p.min
    else:
        lo, span = p.mean, p.std
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (x - lo) / safe, 0.0)


def normalize(ds, method="minmax"):
    """Fit ``minmax`` or ``zscore`` scaling on ``ds`` and return (scaled, params)."""
    if ds.categories:
        raise DataError("encode categorical columns before normalizing")
    if ds.n_rows == 0:
        raise DataError("cannot normalize an empty dataset")
    params = fit_params(ds.features, method, ds.feature_names)
    return apply_norm(ds, params), params


def apply_norm(ds, p):
    """Scale ``ds`` with parameters fitted elsewhere. Values are not clipped."""
    if ds.features.shape[1] != len(p.min):
        raise DataError(f"dataset has {ds.features.shape[1]} columns, params expect {len(p.min)}")
    return ds.replace(features=transform(ds.features, p), norm_params=p)


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def split_indices(labels, test_fraction, seed, stratified=True):
    """Return sorted (train_rows, test_rows) index arrays."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    if not stratified:
        perm = rng.permutation(len(labels))
        n_test = _round_half_up(test_fraction * len(labels))
        return np.sort(perm[n_test:]), np.sort(perm[:n_test])
    train, test = [], []
    for cls in np.unique(labels):
        rows = np.nonzero(labels == cls)[0]
        if len(rows) < 2:
            logger.warning("class %s has a single row; it goes to the training partition", cls)
            train.append(rows)
            continue
        rows = rows[rng.permutation(len(rows))]
        n_test = min(_round_half_up(test_fraction * len(rows)), len(rows) - 1)
        test.append(rows[:n_test])
        train.append(rows[n_test:])
    train = np.sort(np.concatenate(train)) if train else np.empty(0, np.int64)
    test = np.sort(np.concatenate(test)) if test else np.empty(0, np.int64)
    return train, test


def split(ds, test_fraction, seed, stratified=True):
    train, test = split_indices(ds.labels, test_fraction, seed, stratified)
    return ds.take(train), ds.take(test)


def subsample(ds, n_rows, seed, stratified=True):
    """Stratified random subset of ``n_rows`` rows (original order kept)."""
    if n_rows >= ds.n_rows:
        return ds
    _, rows = split_indices(ds.labels, n_rows / ds.n_rows, seed, stratified)
    return ds.take(rows)


def select_classes(ds, names):
    """Keep only rows whose label is in ``names``; labels re-coded lexicographically."""
    missing = sorted(set(names) - set(ds.label_names))
    if missing:
        raise ConfigError(f"classes not present in dataset: {missing}")
    keep_names = sorted(set(names))
    old_to_new = {ds.label_names.index(n): k for k, n in enumerate(keep_names)}
    rows = np.nonzero(np.isin(ds.labels, list(old_to_new)))[0]
    labels = np.array([old_to_new[l] for l in ds.labels[rows]], dtype=np.int64)
    return ds.replace(features=ds.features[rows], labels=labels, label_names=keep_names)


def map_labels(ds, tax, strict=True):
    """Re-code raw labels into taxonomy categories.

    In lenient mode uncovered raw labels map to ``"Unknown"``.
    """
    uncovered = sorted(n for n in ds.label_names if n not in tax.mapping)
    if uncovered and strict:
        raise DataError(f"labels not covered by taxonomy: {uncovered}")
    cats = [tax.mapping.get(n, "Unknown") for n in ds.label_names]
    names = sorted(set(cats))
    recode = np.array([names.index(c) for c in cats], dtype=np.int64)
    labels = recode[ds.labels] if ds.n_rows else ds.labels
    return ds.replace(labels=labels, label_names=names)


def align_labels(ds, label_names):
    """Re-index ``ds`` labels against a reference name list.

    Names unknown to the reference are appended after it, so existing ids keep
    their meaning.
    """
    names = list(label_names)
    for n in ds.label_names:
        if n not in names:
            names.append(n)
    recode = np.array([names.index(n) for n in ds.label_names], dtype=np.int64)
    labels = recode[ds.labels] if ds.n_rows and ds.is_labeled else ds.labels
    return ds.replace(labels=labels, label_names=names)


def save_cache(ds, path):
    """Write normalized features as CSV plus a ``.params.json`` sidecar."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ds.feature_names + [ds.label_column.name])
        for row, lab in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [ds.label_names[lab] if lab >= 0 else ""])
    sidecar = {
        "schema": [{"name": c.name, "kind": c.kind, "index": c.index} for c in ds.schema],
        "label_names": list(ds.label_names),
        "norm": ds.norm_params.to_dict() if ds.norm_params else None,
        "encoding": ds.encoding,
    }
    sidecar_path = path.with_name(path.name + ".params.json")
    sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path, sidecar_path


def load_cache(path):
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".params.json").read_text())
    schema = make_schema((c["name"], c["kind"]) for c in meta["schema"])
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    names = meta["label_names"]
    features = np.array([[float(v) for v in r[:-1]] for r in rows]).reshape(len(rows), -1)
    labels = np.array([names.index(r[-1]) if r[-1] else -1 for r in rows], dtype=np.int64)
    norm = NormParams.from_dict(meta["norm"]) if meta.get("norm") else None
    return Dataset(schema, features, labels, names, norm_params=norm,
                   encoding=meta.get("encoding"), provenance={"source": str(path)})
