"""Synthetic fixtures: Gaussian clusters and schema-conforming flow files.

The flow generator writes CSV rows that parse under a bundled schema, with
class-dependent feature distributions. It exists for tests and demos; it is
not a model of real traffic.
"""

from __future__ import annotations

import csv

import numpy as np

from .dataio import load_schema

DEFAULT_LABELS = {
    "nsl_kdd": ("normal", "neptune", "smurf", "satan", "guess_passwd"),
    "nsl_kdd_difficulty": ("normal", "neptune", "smurf", "satan", "guess_passwd"),
    "unsw_nb15": ("Normal", "DoS", "Exploits", "Reconnaissance", "Generic"),
    "unsw_nb15_id": ("Normal", "DoS", "Exploits", "Reconnaissance", "Generic"),
    "ciciot2023": ("BenignTraffic", "DDoS-ICMP_Flood", "DoS-SYN_Flood", "Recon-PingSweep",
                   "Mirai-udpplain"),
    "ciciot2023_ts": ("BenignTraffic", "DDoS-ICMP_Flood", "DoS-SYN_Flood", "Recon-PingSweep",
                      "Mirai-udpplain"),
}


def gaussian_clusters(n, centers, scale=1.0, seed=0):
    """``n`` points split evenly over isotropic Gaussians.

    Args:
        n: total number of points (the remainder goes to the first clusters).
        centers: (k, dim) array of cluster means.
        scale: common standard deviation.
        seed: RNG seed.

    Returns:
        (X, y) with rows in cluster order.
    """
    centers = np.asarray(centers, dtype=np.float64)
    rng = np.random.default_rng(seed)
    k = len(centers)
    sizes = [n // k + (1 if i < n % k else 0) for i in range(k)]
    X = np.vstack([rng.normal(c, scale, size=(m, len(c))) for c, m in zip(centers, sizes)])
    y = np.repeat(np.arange(k), sizes)
    return X, y


def write_flow_csv(path, schema="nsl_kdd", n_rows=1000, labels=None, weights=None, seed=0,
                   noise=0.5, header=False):
    """Write a surrogate flow file that parses under ``schema``.

    Each raw label gets its own random profile: a log-scale centre for every
    numeric column and a preferred value for every categorical one. ``noise``
    widens the per-row spread around the profile.
    """
    cols = load_schema(schema) if isinstance(schema, str) else schema
    labels = list(labels or DEFAULT_LABELS[schema])
    rng = np.random.default_rng(seed)
    p = np.full(len(labels), 1.0 / len(labels)) if weights is None else np.asarray(weights, float)
    p = p / p.sum()
    profiles = {}
    for lab in labels:
        prof = {}
        for c in cols:
            if c.kind == "numeric":
                prof[c.name] = rng.uniform(-1.0, 3.0)
            elif c.kind == "categorical":
                prof[c.name] = int(rng.integers(0, 4))
        profiles[lab] = prof
    row_labels = rng.choice(len(labels), size=n_rows, p=p)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow([c.name for c in cols])
        for i, li in enumerate(row_labels):
            lab = labels[li]
            prof = profiles[lab]
            row = []
            for c in cols:
                if c.kind == "numeric":
                    v = 10.0 ** (prof[c.name] + noise * rng.normal())
                    if "rate" in c.name:
                        v = min(1.0, v / 1000.0)
                    row.append(f"{v:.6g}")
                elif c.kind == "categorical":
                    j = prof[c.name] if rng.random() > noise / 2 else int(rng.integers(0, 6))
                    row.append(f"{c.name}_{j}")
                elif c.kind == "label":
                    row.append(lab)
                else:
                    row.append(str(i))
            w.writerow(row)
    return path
