"""``tumorbench`` command-line interface.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 configuration error.
Errors are printed to stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError, TumorBenchError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3


def _emit(obj, out=None) -> None:
    text = obj if isinstance(obj, str) else json.dumps(obj, indent=2) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _experiment(args):
    from .experiment import ExperimentConfig

    cfg = ExperimentConfig.load(args.config)
    updates = {}
    if getattr(args, "data_dir", None):
        updates["data_dir"] = args.data_dir
    if getattr(args, "backbone", None):
        updates["backbone"] = args.backbone
    if getattr(args, "run_dir", None):
        updates["run_dir"] = args.run_dir
    if updates:
        try:
            cfg = replace(cfg, **updates)
        except TumorBenchError as exc:
            raise ConfigError(str(exc)) from exc
    train_updates = {}
    if getattr(args, "epochs", None) is not None:
        train_updates["epochs"] = args.epochs
    if getattr(args, "batch_size", None) is not None:
        train_updates["batch_size"] = args.batch_size
    if train_updates:
        cfg = replace(cfg, train=replace(cfg.train, **train_updates))
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args):
    from .data_ingest import load_dataset, save_manifest_cache

    manifest = load_dataset(args.data_dir, workers=args.workers)
    if args.out:
        save_manifest_cache(manifest, args.out)
    _emit({"total": manifest.total, "class_counts": manifest.counts_by_name()})


def cmd_preprocess(args):
    from .data_ingest import load_dataset
    from .preprocess import PreprocessConfig, build_cache

    cfg = PreprocessConfig(side=args.side, kernel=args.kernel, scale_at=args.scale_at)
    manifest = load_dataset(args.data_dir, workers=args.workers)
    build_cache(manifest, args.out, cfg)
    _emit({"records": manifest.total, "cache": str(args.out), "config_key": cfg.cache_key()})


def cmd_split(args):
    from .data_ingest import SplitSpec, load_dataset, save_split, split_dataset
    from .errors import InvalidSpec

    if args.config:
        cfg = _experiment(args)
        spec, data_dir = cfg.split, cfg.data_dir
    else:
        if not args.data_dir:
            raise ConfigError("split needs --data-dir or --config")
        try:
            spec = SplitSpec(train_frac=args.train_frac, val_frac=args.val_frac, test_frac=args.test_frac,
                             seed=args.seed or 0, shuffle_buffer=args.shuffle_buffer,
                             exact_counts=tuple(args.exact_counts) if args.exact_counts else None,
                             stratified=args.stratified, group_by_patient=args.group_by_patient)
        except InvalidSpec as exc:
            raise ConfigError(str(exc)) from exc
        data_dir = args.data_dir
    manifest = load_dataset(data_dir)
    split = split_dataset(manifest, spec)
    save_split(split, spec, args.out)
    _emit({"out": str(args.out), "sizes": dict(zip(("train", "val", "test"), split.sizes)), "seed": spec.seed})


def cmd_train(args):
    from .experiment import run_train

    cfg = _experiment(args)
    history, ckpt = run_train(cfg, cfg.run_dir)
    last = history.records[-1]
    _emit({"run_dir": cfg.run_dir, "epochs": len(history), "best_epoch": history.best_epoch,
           "checkpoint": str(ckpt), "final": {"train_acc": last.train_acc, "val_acc": last.val_acc}})


def cmd_evaluate(args):
    from .experiment import run_evaluate

    preds, report = run_evaluate(args.run_dir, args.checkpoint)
    _emit({"n": report.n, "accuracy": report.accuracy, "predict_seconds": preds.wall_seconds})


def cmd_predict(args):
    from .experiment import predict_file

    _emit(predict_file(args.model, args.image))


def cmd_benchmark(args):
    from .experiment import run_benchmark

    _emit(run_benchmark(args.run_dir, args.repeats))


def cmd_report(args):
    from .report import write_run_report

    written = write_run_report(args.run_dir, formats=tuple(args.format) if args.format else ("csv", "md"))
    _emit({"written": [str(p) for p in written]})


def cmd_compare(args):
    from .report import render_table

    table = render_table([Path(r) for r in args.runs])
    _emit(table.to_csv() if args.format == "csv" else table.to_markdown(), args.out)


def cmd_metrics(args):
    from .data_ingest import CLASS_NAMES
    from .metrics import report_from_labels
    from .train import read_predictions_csv

    y_true, y_pred, y_prob = read_predictions_csv(args.predictions)
    k = y_prob.shape[1] if y_prob is not None else max(3, int(max(y_true.max(), y_pred.max())) + 1)
    names = CLASS_NAMES if k == len(CLASS_NAMES) else None
    report = report_from_labels(y_true, y_pred, k, names)
    _emit(report.to_dict(), args.out)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tumorbench", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="parse a directory of MAT records")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--out", help="optional HDF5 manifest cache")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("preprocess", help="build the preprocessed tensor cache")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--kernel", default="default")
    s.add_argument("--scale-at", choices=("model", "preprocess"), default="model")
    s.add_argument("--side", type=int, default=256)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("split", help="write train/val/test index lists")
    s.add_argument("--config")
    s.add_argument("--data-dir")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--train-frac", type=float, default=0.8)
    s.add_argument("--val-frac", type=float, default=0.1)
    s.add_argument("--test-frac", type=float, default=0.1)
    s.add_argument("--shuffle-buffer", type=int, default=1000)
    s.add_argument("--exact-counts", type=int, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    s.add_argument("--stratified", action="store_true")
    s.add_argument("--group-by-patient", action="store_true")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="fine-tune one backbone")
    s.add_argument("--config", required=True)
    s.add_argument("--data-dir")
    s.add_argument("--backbone", choices=("xception", "resnet50v2", "inception_resnet_v2", "densenet201"))
    s.add_argument("--run-dir")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="predict the test split and write metrics")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--checkpoint")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("predict", help="classify a single MAT record")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("benchmark", help="time prediction over the test split")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--repeats", type=int, default=3)
    s.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("report", help="render figures and tables for a run")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--format", choices=("csv", "md"), action="append")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("compare", help="comparison table over several runs")
    s.add_argument("runs", nargs="+")
    s.add_argument("--format", choices=("csv", "md"), default="md")
    s.add_argument("--out")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("metrics", help="metrics for an external predictions CSV")
    s.add_argument("--predictions", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_metrics)
    return p


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        sys.stderr.write(json.dumps({"error": "ConfigError", "message": str(exc)}) + "\n")
        return EXIT_CONFIG
    except (TumorBenchError, OSError, ValueError, KeyError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(cli())
