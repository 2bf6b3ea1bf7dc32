"""Command-line front end.

Exit codes: 0 success, 2 usage or configuration error, 3 data/model
incompatibility, 4 numerical failure during training.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import dataio, pipeline, som
from .config import load_config, save_config
from .errors import ConfigError, HidsError

logger = logging.getLogger("hids")

BUNDLE_NAME = "bundle.hids"

# artifacts the report command looks for, grouped by stage
STAGE_FILES = {
    "preprocess": ["preprocess.json", "feature_subset.json"],
    "autoencoder": ["ae_loss.csv"],
    "som": ["som_qe.csv", "u_matrix.csv"],
    "dbn": ["dbn_pretrain.csv", "dbn_finetune.csv"],
    "evaluation": ["metrics.json", "metrics.csv", "confusion.csv"],
    "bundle": [BUNDLE_NAME],
}
OPTIONAL_FILES = {"pso": ["pso_trace.csv", "best_config.json"]}


def _out_dir(args):
    if not args.out:
        raise ConfigError("--out is required")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    return out


def _config(args):
    return load_config(args.config, args.override, args.seed)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_prepare(args):
    cfg = _config(args)
    out = _out_dir(args)
    prepared = pipeline.prepare_data(cfg)
    dataio.save_cache(prepared.train, out / "train_cache.csv")
    dataio.save_cache(prepared.test, out / "test_cache.csv")
    _write_json(out / "preprocess.json", prepared.report)
    logger.info("wrote %d train and %d test rows to %s", prepared.train.n_rows,
                prepared.test.n_rows, out)
    return 0


def cmd_select_features(args):
    cfg = _config(args)
    out = _out_dir(args)
    prepared = pipeline.prepare_data(cfg)
    subset = prepared.preprocessor.subset
    (out / "feature_subset.json").write_text(subset.to_json() + "\n")
    logger.info("%s kept %d of %d features", subset.method, len(subset.indices),
                len(prepared.preprocessor.norm.columns))
    return 0


def cmd_train(args):
    cfg = _config(args)
    out = _out_dir(args)
    save_config(cfg, out / "config.json")
    result = pipeline.run_training(cfg, out_dir=out)
    b = result.bundle
    digest = pipeline.save_bundle(b, out / BUNDLE_NAME)
    Z = pipeline.latent(b.autoencoder, b.latent_norm, result.prepared.train.features)
    som.write_grid_csv(out / "bmu_hits.csv", som.bmu_hits(b.anomaly.grid, Z))
    reports = dict(result.reports)
    reports["bundle_sha256"] = digest
    _write_json(out / "reports.json", reports)
    r = result.evaluation.report
    logger.info("held-out accuracy %.4f, macro F1 %s", r.accuracy, r.f1)
    return 0


def cmd_optimize(args):
    cfg = _config(args)
    out = _out_dir(args)
    prepared = pipeline.prepare_data(cfg)
    result = pipeline.optimize_pipeline(cfg, prepared.train, args.particles, args.iters)
    pipeline.write_trace_csv(out / "pso_trace.csv", ("iteration", "best_fitness", "mean_fitness"),
                             result.trace)
    save_config(result.best_config, out / "best_config.json")
    _write_json(out / "pso.json", result.summary())
    logger.info("best fitness %s after %d iterations", result.best_fitness, len(result.trace))
    return 0


def _bundle_and_input(args, path_attr):
    if not args.bundle:
        raise ConfigError("--bundle is required")
    path = getattr(args, path_attr)
    if not path or not Path(path).exists():
        raise ConfigError(f"input file not found: {path}")
    return pipeline.load_bundle(args.bundle), path


def cmd_evaluate(args):
    bundle, path = _bundle_and_input(args, "test")
    out = _out_dir(args)
    raw = bundle.preprocessor.parse(path)
    ev = pipeline.evaluate(bundle, raw)
    pipeline.write_evaluation(out, ev)
    logger.info("accuracy %.4f on %d rows", ev.report.accuracy, ev.report.n_samples)
    return 0


def cmd_score(args):
    bundle, path = _bundle_and_input(args, "input")
    out = _out_dir(args)
    raw = bundle.preprocessor.parse(path, require_label=False)
    rows = pipeline.score(bundle, raw)
    pipeline.write_verdicts_csv(out / "verdicts.csv", rows)
    logger.info("scored %d rows", len(rows))
    return 0


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def _trace_rows(run):
    """Long-format (source, series, step, value) rows from every trace CSV present."""
    rows = []
    for name in ("ae_loss.csv", "som_qe.csv", "dbn_finetune.csv", "pso_trace.csv"):
        p = run / name
        if not p.exists():
            continue
        header, *body = _read_csv(p)
        for r in body:
            for col, val in zip(header[1:], r[1:]):
                rows.append((name[:-4], col, r[0], val))
    p = run / "dbn_pretrain.csv"
    if p.exists():
        for layer, epoch, val in _read_csv(p)[1:]:
            rows.append(("dbn_pretrain", f"layer{layer}", epoch, val))
    return rows


def cmd_report(args):
    run = Path(args.run_dir)
    if not run.is_dir() or not any(run.iterdir()):
        raise ConfigError(f"run directory {run} is missing or empty")
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# Run summary", "", f"Run directory: `{run}`", "", "## Stages", ""]
    warnings = []
    for stage, files in {**STAGE_FILES, **OPTIONAL_FILES}.items():
        present = [f for f in files if (run / f).exists()]
        missing = [f for f in files if f not in present]
        if stage in OPTIONAL_FILES and not present:
            lines.append(f"- {stage}: not run")
            continue
        status = "complete" if not missing else f"MISSING {', '.join(missing)}"
        lines.append(f"- {stage}: {status}")
        if missing:
            warnings.append(f"stage {stage} is missing {', '.join(missing)}")
    if (run / "metrics.json").exists():
        m = json.loads((run / "metrics.json").read_text())
        lines += ["", "## Metrics", "", "| metric | value |", "|---|---|"]
        for key in ("accuracy", "precision", "recall", "specificity", "f1", "f2", "fpr", "mcc",
                    "gmean", "balanced_accuracy", "auc_roc"):
            v = m.get(key)
            lines.append(f"| {key} | {'n/a' if v is None else f'{v:.6f}'} |")
    if warnings:
        lines += ["", "## Warnings", ""] + [f"- {w}" for w in warnings]
        for w in warnings:
            logger.warning(w)
    (out / "summary.md").write_text("\n".join(lines) + "\n")
    with open(out / "all_traces.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "series", "step", "value"])
        w.writerows(_trace_rows(run))
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or TOML run configuration")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path config override, repeatable (e.g. som.eta0=0.05)")
    verb = common.add_mutually_exclusive_group()
    verb.add_argument("--quiet", action="store_true")
    verb.add_argument("--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hids", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="parse, split, encode, normalize; write caches")
    sub.add_parser("select-features", parents=[common], help="run the configured feature selection")
    sub.add_parser("train", parents=[common], help="train every stage and write a bundle")
    p = sub.add_parser("optimize", parents=[common], help="PSO search over the configured space")
    p.add_argument("--particles", type=int)
    p.add_argument("--iters", type=int)
    p = sub.add_parser("evaluate", parents=[common], help="metrics of a bundle on a labeled file")
    p.add_argument("--bundle")
    p.add_argument("--test")
    p = sub.add_parser("score", parents=[common], help="per-row verdicts for a file")
    p.add_argument("--bundle")
    p.add_argument("--input")
    p = sub.add_parser("report", parents=[common], help="summarize a run directory")
    p.add_argument("run_dir")
    return parser


COMMANDS = {
    "prepare": cmd_prepare,
    "select-features": cmd_select_features,
    "train": cmd_train,
    "optimize": cmd_optimize,
    "evaluate": cmd_evaluate,
    "score": cmd_score,
    "report": cmd_report,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.quiet else logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return COMMANDS[args.command](args)
    except HidsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
