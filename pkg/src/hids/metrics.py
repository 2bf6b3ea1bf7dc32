"""Confusion counts, the ten evaluation metrics, ROC/AUC and multiclass reports.

Undefined ratios (zero denominators) are reported as ``None``, never 0.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DataError

METRIC_NAMES = (
    "accuracy", "precision", "recall", "specificity", "f1", "f2",
    "fpr", "mcc", "gmean", "balanced_accuracy",
)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn


def _ratio(num, den):
    return None if den == 0 else num / den


def confusion(preds, labels, positive_class=1):
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise DataError(f"preds and labels differ in length ({preds.shape} vs {labels.shape})")
    if preds.size == 0:
        raise DataError("cannot compute a confusion matrix on zero samples")
    p = preds == positive_class
    t = labels == positive_class
    return ConfusionCounts(
        tp=int(np.sum(p & t)), tn=int(np.sum(~p & ~t)),
        fp=int(np.sum(p & ~t)), fn=int(np.sum(~p & t)),
    )


def basic_metrics(c):
    """All ten scalar metrics for one confusion table, as a dict."""
    tp, tn, fp, fn = c.tp, c.tn, c.fp, c.fn
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    specificity = _ratio(tn, tn + fp)
    f1 = f2 = None
    if precision is not None and recall is not None:
        f1 = _ratio(2 * precision * recall, precision + recall)
        f2 = _ratio(5 * precision * recall, 4 * precision + recall)
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = None if denom == 0 else (tp * tn - fp * fn) / math.sqrt(denom)
    gmean = balanced = None
    if recall is not None and specificity is not None:
        gmean = math.sqrt(recall * specificity)
        balanced = 0.5 * (recall + specificity)
    return {
        "accuracy": _ratio(tp + tn, c.total),
        "precision": precision,
        "recall": recall,
        "specificity": specificity,
        "f1": f1,
        "f2": f2,
        "fpr": _ratio(fp, fp + tn),
        "mcc": mcc,
        "gmean": gmean,
        "balanced_accuracy": balanced,
    }


def roc_curve(scores, labels):
    """ROC points over every distinct threshold, highest score first.

    Returns (fpr, tpr, thresholds); the curve starts at (0, 0).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    # last index of each run of equal scores
    cut = np.nonzero(np.diff(s))[0]
    cut = np.append(cut, len(s) - 1)
    tps = np.cumsum(y)[cut]
    fps = np.cumsum(~y)[cut]
    n_pos, n_neg = y.sum(), (~y).sum()
    tpr = np.concatenate([[0.0], tps / n_pos]) if n_pos else np.full(len(cut) + 1, np.nan)
    fpr = np.concatenate([[0.0], fps / n_neg]) if n_neg else np.full(len(cut) + 1, np.nan)
    return fpr, tpr, np.concatenate([[np.inf], s[cut]])


def auc_roc(scores, labels):
    """Trapezoidal area under the ROC curve; ``None`` unless both classes occur.

    Grouping tied scores into one threshold makes the trapezoid rule give
    ties half credit, so the result equals the pairwise-comparison AUC.
    """
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        return None
    fpr, tpr, _ = roc_curve(scores, labels)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def confusion_grid(preds, labels, k):
    """k x k counts; rows are true classes, columns predictions."""
    grid = np.zeros((k, k), dtype=np.int64)
    np.add.at(grid, (np.asarray(labels), np.asarray(preds)), 1)
    return grid


@dataclass
class MetricsReport:
    accuracy: float | None = None
    precision: float | None = None
    recall: float | None = None
    specificity: float | None = None
    f1: float | None = None
    f2: float | None = None
    fpr: float | None = None
    mcc: float | None = None
    gmean: float | None = None
    balanced_accuracy: float | None = None
    auc_roc: float | None = None
    n_samples: int = 0
    per_class: list = field(default_factory=list)
    macro_skipped: int = 0
    confusion: list | None = None
    class_names: list | None = None
    binary: dict | None = None

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write_csv(self, path):
        """Per-class table followed by the macro row."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "support", *METRIC_NAMES])
            for row in self.per_class:
                w.writerow([row["class"], row["support"], *(_fmt(row[m]) for m in METRIC_NAMES)])
            macro = self.to_dict()
            w.writerow(["macro", self.n_samples, *(_fmt(macro[m]) for m in METRIC_NAMES)])


def _fmt(v):
    return "" if v is None else repr(float(v))


def multiclass_report(preds, labels, k, class_names=None, null_classes=()):
    """One-vs-rest metrics per class, unweighted macro averages, overall accuracy.

    A class absent from ``labels`` (or listed in ``null_classes``) gets a
    null-filled row; macro averages skip null entries and ``macro_skipped``
    counts the rows left out.
    """
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if k < 2:
        raise DataError("multiclass report needs k >= 2")
    if preds.shape != labels.shape or preds.size == 0:
        raise DataError("preds and labels must be equal-length and non-empty")
    names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
    rows = []
    for cls in range(k):
        support = int(np.sum(labels == cls))
        if support == 0 or cls in null_classes:
            vals = dict.fromkeys(METRIC_NAMES)
        else:
            vals = basic_metrics(confusion(preds, labels, cls))
        rows.append({"class": names[cls], "support": support, **vals})
    report = MetricsReport(n_samples=int(labels.size), per_class=rows)
    for m in METRIC_NAMES:
        vals = [r[m] for r in rows if r[m] is not None]
        setattr(report, m, float(np.mean(vals)) if vals else None)
    report.macro_skipped = sum(1 for r in rows if all(r[m] is None for m in METRIC_NAMES))
    report.accuracy = float(np.mean(preds == labels))
    report.confusion = confusion_grid(preds, labels, k).tolist()
    report.class_names = names
    return report


def write_roc_csv(path, scores, labels):
    fpr, tpr, thr = roc_curve(scores, labels)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr", "threshold"])
        for a, b, t in zip(fpr, tpr, thr):
            w.writerow([repr(float(a)), repr(float(b)), repr(float(t))])


def write_confusion_csv(path, grid, class_names):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred", *class_names])
        for name, row in zip(class_names, grid):
            w.writerow([name, *row])
