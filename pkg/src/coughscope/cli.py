"""Command-line entry point.

Settings are resolved in this order, later wins: built-in defaults, the JSON
file given by ``--config``, explicit command-line flags. A config file may hold
any of these keys::

    {"seed": 0, "workers": 1, "chunk_size": null,
     "preprocess": {...}, "train": {...}, "encoder": {...}, "fusion": {...},
     "synth": {"n_per_class": 200, "profiles": "profiles.json"}}

Exit codes: 0 success, 1 input or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import features, interpret, pipeline, synthgen, training
from .checkpoint import Checkpoint
from .signal_prep import PreprocessConfig, SignalError, WavError
from .tabular import EncoderConfig, SchemaError, read_symptom_csv
from .training import TrainConfig

log = logging.getLogger("coughscope")

EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2


SCALAR_KEYS = {"seed", "workers", "chunk_size"}
# allowed keys of each config section
SECTION_KEYS = {
    "preprocess": {f.name for f in fields(PreprocessConfig)},
    "train": {f.name for f in fields(TrainConfig)},
    "encoder": {f.name for f in fields(EncoderConfig)},
    "fusion": {"hidden1", "hidden2", "embed_dim"},
    "synth": {"n_per_class", "profiles"},
}


class DataError(Exception):
    """Raised for problems with user-supplied files (exit code 1)."""


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise DataError(f"config {path} must be a JSON object")
    unknown = set(cfg) - SCALAR_KEYS - set(SECTION_KEYS)
    if unknown:
        raise DataError(f"unknown config keys in {path}: {sorted(unknown)}")
    for name, allowed in SECTION_KEYS.items():
        section = cfg.get(name, {})
        if not isinstance(section, dict):
            raise DataError(f"config section {name!r} must be a JSON object")
        if set(section) - allowed:
            raise DataError(f"unknown keys in config section {name!r}: {sorted(set(section) - allowed)}")
    return cfg


def _setting(args, cfg, name, default):
    value = getattr(args, name, None)
    if value is not None:
        return value
    return cfg.get(name, default)


def _section(cfg, key, overrides) -> dict:
    merged = dict(cfg.get(key, {}))
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def _preprocess_config(cfg) -> PreprocessConfig:
    try:
        return PreprocessConfig.from_dict(cfg.get("preprocess", {}))
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid preprocess config: {exc}") from exc


def _records(args):
    if args.symptoms is not None:
        return read_symptom_csv(args.symptoms)
    return [e.record for e in pipeline.read_manifest(args.manifest)]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_extract(args, cfg) -> int:
    pcfg = _preprocess_config(cfg)
    workers = _setting(args, cfg, "workers", 1)
    chunk = _setting(args, cfg, "chunk_size", None)
    if args.manifest is not None:
        items = pipeline.manifest_items(args.manifest, pipeline.read_manifest(args.manifest))
    elif args.input is not None:
        root = Path(args.input)
        if not root.is_dir():
            raise DataError(f"{root} is not a directory")
        items = [(p, p.relative_to(root).as_posix(), "") for p in sorted(root.rglob("*.wav"))]
        if not items:
            log.warning("no .wav files under %s", root)
    else:
        items = [(Path(p), Path(p).name, "") for p in args.wav]
    res = pipeline.extract_many(items, pcfg, chunk, workers)
    features.write_feature_csv(args.out, res.rows)
    for path in res.empty:
        log.warning("%s: no cough segment detected", path)
    for err in res.errors:
        log.error("%s", err)
    print(f"{len(res.rows)} segment rows written to {args.out}")
    return EXIT_DATA if res.errors else EXIT_OK


def _train_config(args, cfg) -> TrainConfig:
    flags = {"task": args.task, "epochs": args.epochs, "learning_rate": args.learning_rate,
             "batch_size": args.batch_size, "alpha": args.alpha,
             "test_fraction": args.test_fraction, "weight_decay": args.weight_decay,
             "seed": _setting(args, cfg, "seed", None)}
    try:
        return TrainConfig.from_dict(_section(cfg, "train", flags))
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid train config: {exc}") from exc


def cmd_train(args, cfg) -> int:
    tcfg = _train_config(args, cfg)
    dataset, records = pipeline.prepare(args.manifest, args.features, _preprocess_config(cfg),
                                        _setting(args, cfg, "workers", 1), args.features_out)
    ecfg = EncoderConfig.from_dict(cfg.get("encoder", {}))
    result = pipeline.run_task(dataset, records, tcfg, args.out, encoder_config=ecfg,
                               **cfg.get("fusion", {}))
    rep = result.report
    print(f"task {tcfg.task}: test accuracy {rep.top1_accuracy:.4f}; artifacts in {args.out}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    dataset, _ = pipeline.prepare(args.manifest, args.features, _preprocess_config(cfg),
                                  _setting(args, cfg, "workers", 1))
    report = training.evaluate(ckpt, dataset)
    report.write_json(args.out)
    if args.csv is not None:
        report.write_csv(args.csv)
    print(f"accuracy {report.top1_accuracy:.4f} on {len(dataset)} rows; metrics in {args.out}")
    return EXIT_OK


def cmd_explain(args, cfg) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    records = _records(args)
    if not records:
        raise DataError("no symptom records to explain")
    report = interpret.explain_records(records, ckpt, uniform_steps=args.uniform_steps)
    interpret.write_importance_csv(args.out, report)
    if args.per_sample is not None:
        with open(args.per_sample, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", *report.feature_names])
            for i, row in enumerate(report.per_sample):
                w.writerow([i, *(features.format_float(v) for v in row)])
    top = ", ".join(f"{n}={v:.3f}" for n, v in report.ranked()[:3])
    print(f"top fields: {top}")
    return EXIT_OK


def cmd_synth(args, cfg) -> int:
    scfg = _section(cfg, "synth", {"n_per_class": args.n_per_class, "profiles": args.profiles})
    n = int(scfg.get("n_per_class", 200))
    if n <= 0:
        raise DataError("n_per_class must be positive")
    profiles = synthgen.DEFAULT_PROFILES
    if scfg.get("profiles") is not None:
        profiles = synthgen.load_profiles(scfg["profiles"])
    out = Path(args.out)
    synthgen.gen_dataset(out, n, profiles, seed=_setting(args, cfg, "seed", 0),
                         workers=_setting(args, cfg, "workers", 1))
    synthgen.dump_profiles(out / "profiles.json", profiles)
    print(f"{n * len(profiles)} recordings written to {out}")
    return EXIT_OK


def cmd_correlate(args, cfg) -> int:
    result = interpret.symptom_correlation(_records(args))
    interpret.write_correlation_csv(args.out, result)
    if result.constant:
        log.warning("constant fields (correlations set to 0): %s", ", ".join(result.constant))
    print(f"{len(result.names)}x{len(result.names)} correlation matrix written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _global_flags(parser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default,
                        help="random seed for synthesis, splitting and initialization")
    parser.add_argument("--workers", type=int, default=default,
                        help="number of worker processes for extract/synth (default 1)")
    parser.add_argument("--config", default=default, help="JSON config file; flags override it")
    parser.add_argument("-v", "--verbose", action="store_true", default=default,
                        help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coughscope",
        description="Cough-audio and symptom classification toolkit.",
        epilog="Exit codes: 0 success, 1 input/data error, 2 usage error.",
    )
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("extract", parents=[common], help="WAV files -> segment feature CSV")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="directory searched recursively for .wav files")
    src.add_argument("--wav", nargs="+", help="one or more WAV files")
    src.add_argument("--manifest", help="manifest CSV; labels are copied into the output")
    p.add_argument("--out", required=True, help="output feature CSV")
    p.add_argument("--chunk-size", dest="chunk_size", type=int, default=None,
                   help="frames per aggregated vector (default: whole segment)")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", parents=[common], help="split, train, evaluate and explain one task")
    p.add_argument("--manifest", required=True, help="manifest CSV (wav_path,label,symptom columns)")
    p.add_argument("--features", help="precomputed feature CSV (skips extraction)")
    p.add_argument("--features-out", dest="features_out", help="save extracted features here")
    p.add_argument("--task", choices=sorted(training.TASKS), help="default both_multiclass")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--alpha", type=float, help="sparsity loss weight in [0, 1)")
    p.add_argument("--test-fraction", dest="test_fraction", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float,
                   help="decoupled weight decay (default 0)")
    p.add_argument("--out", required=True, help="output directory for checkpoint and reports")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a labeled set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", help="precomputed feature CSV (skips extraction)")
    p.add_argument("--out", required=True, help="metrics JSON")
    p.add_argument("--csv", help="optional per-class metrics CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", parents=[common], help="symptom field importances")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--symptoms", help="symptom CSV")
    src.add_argument("--manifest", help="manifest CSV")
    p.add_argument("--out", required=True, help="global importance CSV, sorted descending")
    p.add_argument("--per-sample", dest="per_sample", help="optional per-record importance CSV")
    p.add_argument("--uniform-steps", dest="uniform_steps", action="store_true",
                   help="weight decision steps equally instead of by their contribution")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic labeled dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-per-class", dest="n_per_class", type=int, help="default 200")
    p.add_argument("--profiles", help="profile JSON (default: built-in profiles)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("correlate", parents=[common], help="symptom correlation matrix")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--symptoms", help="symptom CSV")
    src.add_argument("--manifest", help="manifest CSV")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_correlate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _load_config(args.config)
        return args.func(args, cfg)
    except (DataError, WavError, SignalError, SchemaError, ValueError, KeyError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
