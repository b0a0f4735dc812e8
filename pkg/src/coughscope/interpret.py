"""Feature importances from attention masks, and symptom correlations."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch

from . import tabular
from .checkpoint import Checkpoint
from .tabular import FLAG_FIELDS, TabularSchema, encode_records


@dataclass
class ImportanceReport:
    feature_names: list
    global_importance: np.ndarray
    per_sample: np.ndarray

    def ranked(self) -> list[tuple[str, float]]:
        order = sorted(range(len(self.feature_names)),
                       key=lambda j: (-self.global_importance[j], self.feature_names[j]))
        return [(self.feature_names[j], float(self.global_importance[j])) for j in order]

    def as_dict(self) -> dict:
        return {n: float(w) for n, w in zip(self.feature_names, self.global_importance)}


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    s = x.sum(axis=-1, keepdims=True)
    return np.divide(x, s, out=np.full_like(x, 1.0 / x.shape[-1]), where=s > 0)


def aggregate_masks(masks, step_weights=None, feature_names=None) -> ImportanceReport:
    """Combine per-step masks into per-sample and global importances.

    ``step_weights`` is either ``(n_steps,)`` or ``(B, n_steps)``; ``None`` means
    uniform. Samples whose weights are all zero fall back to uniform weights.
    """
    if len(masks) == 0:
        raise ValueError("no masks to aggregate")
    stack = np.stack([np.asarray(m.values.detach() if isinstance(m, tabular.Mask) else m,
                                 dtype=np.float64) for m in masks])  # steps x B x D
    n_steps, batch, width = stack.shape
    if step_weights is None:
        w = np.ones((batch, n_steps))
    else:
        w = np.asarray(step_weights.detach() if isinstance(step_weights, torch.Tensor)
                       else step_weights, dtype=np.float64)
        w = np.broadcast_to(w, (batch, n_steps)).copy()
    if np.any(w < 0):
        raise ValueError("step weights must be nonnegative")
    w = _normalize_rows(w)
    per_sample = _normalize_rows(np.einsum("bs,sbd->bd", w, stack))
    global_imp = _normalize_rows(per_sample.mean(axis=0))
    names = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(width)]
    return ImportanceReport(names, global_imp, per_sample)


def to_fields(report: ImportanceReport, schema: TabularSchema) -> ImportanceReport:
    """Sum column importances over each source field's columns."""
    cols = schema.column_fields()
    names = schema.field_names
    agg = np.zeros((len(cols), len(names)))
    for j, f in enumerate(cols):
        agg[j, names.index(f)] = 1.0
    return ImportanceReport(names, report.global_importance @ agg, report.per_sample @ agg)


def explain_records(records, ckpt: Checkpoint, uniform_steps: bool = False) -> ImportanceReport:
    """Field-level importances for a batch of records under a trained checkpoint."""
    if not ckpt.fusion_config.use_symptoms:
        raise ValueError("checkpoint has no symptom branch to explain")
    schema = ckpt.schema
    tab = encode_records(records, schema)
    params = ckpt.params()
    with torch.no_grad():
        q = tabular.embed_and_normalize(tab, params, schema, tabular.EVAL)
        enc = tabular.forward_steps(q, params, ckpt.encoder_config, tabular.EVAL)
    weights = None if uniform_steps else enc.contributions
    report = aggregate_masks(enc.masks, weights, schema.column_fields())
    return to_fields(report, schema)


def explain_sample(record, ckpt: Checkpoint, uniform_steps: bool = False) -> dict:
    rep = explain_records([record], ckpt, uniform_steps)
    return {n: float(w) for n, w in zip(rep.feature_names, rep.per_sample[0])}


def write_importance_csv(path, weights) -> None:
    """``weights``: mapping or ``ImportanceReport``; written sorted descending."""
    if isinstance(weights, ImportanceReport):
        items = weights.ranked()
    else:
        items = sorted(weights.items(), key=lambda kv: (-kv[1], kv[0]))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "weight"])
        for name, val in items:
            w.writerow([name, repr(float(val))])


CORRELATION_FIELDS = ("age",) + FLAG_FIELDS


@dataclass
class CorrelationResult:
    names: list
    matrix: np.ndarray
    constant: list  # fields with zero variance (their off-diagonal entries are 0)


def symptom_correlation(records, names=CORRELATION_FIELDS) -> CorrelationResult:
    """Pearson correlation between all numeric/binary symptom fields."""
    if len(records) < 2:
        raise ValueError("need at least two records")
    x = np.array([[float(r[n] if isinstance(r, dict) else getattr(r, n)) for n in names]
                  for r in records])
    xc = x - x.mean(axis=0)
    sd = np.sqrt((xc**2).mean(axis=0))
    constant = sd == 0
    z = np.divide(xc, sd, out=np.zeros_like(xc), where=~constant)
    corr = np.clip(z.T @ z / len(x), -1.0, 1.0)
    corr = (corr + corr.T) / 2
    np.fill_diagonal(corr, 1.0)
    return CorrelationResult(list(names), corr, [n for n, c in zip(names, constant) if c])


def write_correlation_csv(path, result: CorrelationResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["field", *result.names])
        for name, row in zip(result.names, result.matrix):
            w.writerow([name, *(format(float(v), ".12g") for v in row)])
