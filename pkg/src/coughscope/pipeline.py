"""End-to-end workflows: feature extraction over files and per-task runs."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import features, interpret, signal_prep, training
from .checkpoint import Checkpoint
from .signal_prep import PreprocessConfig, WavError
from .tabular import RECORD_FIELDS, SymptomRecord, encode_records
from .training import Dataset, TrainConfig

log = logging.getLogger(__name__)


def extract_file(path, cfg: PreprocessConfig = PreprocessConfig(), chunk_size=None):
    """All aggregated feature vectors of one recording, in segment order.

    A digitally silent recording has no segments rather than an undefined level.
    """
    raw = signal_prep.load_wav(path)
    if not np.any(raw.samples):
        return []
    sig = signal_prep.preprocess(raw, cfg)
    vectors = []
    for seg in signal_prep.segment_coughs(sig, cfg):
        vectors.extend(features.segment_features(seg, cfg, chunk_size))
    return vectors


def _extract_job(args):
    path, cfg, chunk_size = args
    try:
        return extract_file(path, cfg, chunk_size), None
    except (WavError, signal_prep.SignalError, OSError) as exc:
        return None, f"{path}: {exc}"


@dataclass
class ExtractionResult:
    rows: list      # (segment_id, label, SegmentFeatureVector)
    errors: list    # per-file diagnostics
    empty: list     # files without any segment


def extract_many(items, cfg: PreprocessConfig = PreprocessConfig(), chunk_size=None,
                 workers: int = 1) -> ExtractionResult:
    """``items``: sequence of ``(path, segment_prefix, label)``."""
    jobs = [(Path(p), cfg, chunk_size) for p, _, _ in items]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_extract_job, jobs, chunksize=4))
    else:
        results = [_extract_job(j) for j in jobs]
    rows, errors, empty = [], [], []
    for (path, prefix, label), (vecs, err) in zip(items, results):
        if err is not None:
            errors.append(err)
        elif not vecs:
            empty.append(str(path))
        else:
            rows.extend((f"{prefix}#{k}", label, v) for k, v in enumerate(vecs))
    return ExtractionResult(rows, errors, empty)


@dataclass
class ManifestEntry:
    wav_path: str
    label: str
    record: SymptomRecord


def read_manifest(path) -> list[ManifestEntry]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = ["wav_path", "label", *RECORD_FIELDS]
        if reader.fieldnames != expected:
            raise ValueError(f"{path}: manifest header must be {','.join(expected)}")
        return [ManifestEntry(row["wav_path"], row["label"], SymptomRecord.from_strings(row))
                for row in reader]


def manifest_items(manifest_path, entries):
    base = Path(manifest_path).parent
    return [(base / e.wav_path, e.wav_path, e.label) for e in entries]


def build_dataset(entries, feature_rows) -> tuple[Dataset, list]:
    """Join feature rows (one per segment) with manifest symptoms and labels.

    Returns the dataset and the matching symptom records. Recording index is
    used as the group id so splits never separate segments of one recording.
    """
    index = {e.wav_path: i for i, e in enumerate(entries)}
    labels, records, cough, groups = [], [], [], []
    for seg_id, label, values in feature_rows:
        key = seg_id.rsplit("#", 1)[0]
        if key not in index:
            raise ValueError(f"segment {seg_id} has no manifest entry")
        i = index[key]
        labels.append(entries[i].label)
        records.append(entries[i].record)
        cough.append(values)
        groups.append(i)
    if not labels:
        raise ValueError("no feature rows")
    ds = Dataset(labels, encode_records(records), np.asarray(cough, dtype=np.float64),
                 np.asarray(groups))
    return ds, records


def load_feature_rows(path):
    ids, labels, mat = features.read_feature_csv(path)
    return list(zip(ids, labels, mat))


def prepare(manifest_path, features_csv=None, cfg: PreprocessConfig = PreprocessConfig(),
            workers: int = 1, features_out=None):
    """Manifest + (cached or freshly extracted) features -> ``(dataset, records)``."""
    entries = read_manifest(manifest_path)
    if features_csv is not None:
        rows = load_feature_rows(features_csv)
    else:
        res = extract_many(manifest_items(manifest_path, entries), cfg, workers=workers)
        if res.errors:
            raise WavError("; ".join(res.errors))
        if features_out is not None:
            features.write_feature_csv(features_out, res.rows)
        rows = [(sid, lab, vec.values) for sid, lab, vec in res.rows]
    return build_dataset(entries, rows)


@dataclass
class TaskResult:
    report: training.MetricsReport
    checkpoint: Checkpoint
    history: list
    importance: interpret.ImportanceReport | None


def run_task(dataset: Dataset, records, cfg: TrainConfig, out_dir=None, **train_kw) -> TaskResult:
    """Split, train, evaluate and explain one task; optionally write artifacts.

    Files written to ``out_dir``: ``metrics.json``, ``metrics.csv``,
    ``history.csv``, ``checkpoint.json`` and, when the symptom branch is used,
    ``importance.csv``.
    """
    train_idx, test_idx = training.stratified_split(dataset.labels, dataset.groups,
                                                    cfg.test_fraction, cfg.seed)
    ckpt, history = training.train(dataset.subset(train_idx), cfg, **train_kw)
    report = training.evaluate(ckpt, dataset.subset(test_idx))
    importance = None
    if ckpt.fusion_config.use_symptoms:
        importance = interpret.explain_records([records[i] for i in test_idx], ckpt)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.write_json(out / "metrics.json")
        report.write_csv(out / "metrics.csv")
        training.write_history_csv(out / "history.csv", history)
        ckpt.save(out / "checkpoint.json")
        if importance is not None:
            interpret.write_importance_csv(out / "importance.csv", importance)
    return TaskResult(report, ckpt, history, importance)
