"""Gradients, the training loop and evaluation metrics."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from . import fusion, tabular
from .checkpoint import Checkpoint
from .fusion import FusionConfig, TASKS
from .tabular import EncoderConfig, TabularInput, TabularSchema

log = logging.getLogger(__name__)

MULTICLASS_NAMES = ["healthy", "asthma", "bronchitis", "covid_positive"]
BINARY_NAMES = ["covid_negative", "covid_positive"]
POSITIVE_LABEL = "covid_positive"

torch.use_deterministic_algorithms(True)


@dataclass(frozen=True)
class TrainConfig:
    task: str = "both_multiclass"
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 64
    alpha: float = 0.01
    seed: int = 0
    test_fraction: float = 0.2
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError("invalid epochs, batch_size or learning_rate")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Dataset:
    """Aligned samples: raw class labels plus optional symptoms and cough features."""

    labels: list
    tab: TabularInput | None = None
    cough: np.ndarray | None = None
    groups: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.labels)
        if self.tab is not None and len(self.tab) != n:
            raise ValueError("symptom rows do not match labels")
        if self.cough is not None and len(self.cough) != n:
            raise ValueError("cough rows do not match labels")
        if self.groups is None:
            self.groups = np.arange(n)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            [self.labels[i] for i in idx],
            None if self.tab is None else self.tab.subset(idx),
            None if self.cough is None else self.cough[idx],
            self.groups[idx],
        )


def task_classes(task: str) -> list[str]:
    return MULTICLASS_NAMES if TASKS[task][2] else BINARY_NAMES


def task_targets(labels, task: str) -> np.ndarray:
    if TASKS[task][2]:
        unknown = set(labels) - set(MULTICLASS_NAMES)
        if unknown:
            raise ValueError(f"unknown labels {sorted(unknown)}")
        return np.array([MULTICLASS_NAMES.index(lab) for lab in labels], dtype=np.int64)
    return np.array([int(lab == POSITIVE_LABEL) for lab in labels], dtype=np.int64)


def stratified_split(labels, groups, test_fraction: float, seed: int):
    """Seeded train/test split by whole groups (recordings), stratified by label."""
    labels = np.asarray(labels)
    groups = np.asarray(groups)
    rng = np.random.default_rng(seed)
    test_groups = set()
    for lab in sorted(set(labels.tolist())):
        g = np.array(sorted(set(groups[labels == lab].tolist())))
        rng.shuffle(g)
        n_test = int(round(len(g) * test_fraction))
        test_groups.update(g[:n_test].tolist())
    is_test = np.array([g in test_groups for g in groups.tolist()])
    return np.flatnonzero(~is_test), np.flatnonzero(is_test)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def gradient(loss_fn, params: dict, frozen=()) -> dict:
    """Reverse-mode gradients of ``loss_fn(params)`` for every parameter.

    Parameters listed in ``frozen`` are held constant and get zero gradient.
    """
    leaves = {}
    for k, v in params.items():
        leaf = v.detach().clone()
        if k not in frozen and leaf.is_floating_point():
            leaf.requires_grad_(True)
        leaves[k] = leaf
    loss = loss_fn(leaves)
    if not torch.isfinite(loss):
        raise FloatingPointError("loss is not finite")
    wrt = [k for k, v in leaves.items() if v.requires_grad]
    grads = torch.autograd.grad(loss, [leaves[k] for k in wrt], allow_unused=True)
    out = {k: torch.zeros_like(v) for k, v in params.items()}
    for k, g in zip(wrt, grads):
        if g is not None:
            out[k] = g
    return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _check_modality(dataset: Dataset, fcfg: FusionConfig):
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if fcfg.use_cough and dataset.cough is None:
        raise ValueError("task needs cough features but the dataset has none")
    if fcfg.use_symptoms and dataset.tab is None:
        raise ValueError("task needs symptom records but the dataset has none")


def batch_loss(params, fcfg, ecfg, schema, tab, cough, targets, mode):
    """Returns ``(total, ce, se, output)`` for one batch."""
    out = fusion.forward(params, fcfg, ecfg, schema, tab, cough, mode)
    ce = fusion.classification_loss(out.prediction, targets)
    se = tabular.sparsity_loss(out.masks, ecfg.epsilon) if out.masks else torch.zeros((), dtype=ce.dtype)
    return fusion.total_loss(ce, se, fcfg.alpha), ce, se, out


def train(dataset: Dataset, cfg: TrainConfig, encoder_config: EncoderConfig | None = None,
          schema: TabularSchema | None = None, **fusion_overrides):
    """Mini-batch Adam training. Returns ``(checkpoint, history)``."""
    fcfg = FusionConfig.for_task(cfg.task, alpha=cfg.alpha, **fusion_overrides)
    ecfg = schema_ = None
    if fcfg.use_symptoms:
        ecfg = encoder_config or EncoderConfig(output_dim=fcfg.embed_dim)
        schema_ = schema or TabularSchema()
    _check_modality(dataset, fcfg)

    targets = task_targets(dataset.labels, cfg.task)
    mean = std = cough = None
    if fcfg.use_cough:
        raw = np.asarray(dataset.cough, dtype=np.float64)
        mean = raw.mean(axis=0).astype(np.float32).astype(np.float64)
        std = raw.std(axis=0)
        std = np.where(std > 1e-8, std, 1.0).astype(np.float32).astype(np.float64)
        cough = (raw - mean) / std

    params = fusion.init_params(fcfg, ecfg, schema_, seed=cfg.seed)
    trainable = [v.requires_grad_(True) for k, v in params.items() if not tabular.is_buffer(k)]
    # decoupled decay; weight_decay=0 is plain Adam
    opt = torch.optim.AdamW(trainable, lr=cfg.learning_rate, betas=(0.9, 0.999),
                            weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)

    n = len(dataset)
    n_batches = max(1, int(np.ceil(n / cfg.batch_size)))
    history = []
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        sums = np.zeros(3)
        for idx in np.array_split(perm, n_batches):
            tab = dataset.tab.subset(idx) if fcfg.use_symptoms else None
            xb = cough[idx] if fcfg.use_cough else None
            total, ce, se, _ = batch_loss(params, fcfg, ecfg, schema_, tab, xb, targets[idx], tabular.TRAIN)
            opt.zero_grad()
            total.backward()
            opt.step()
            sums += len(idx) * np.array([ce.item(), se.item(), total.item()])
        ce_m, se_m, tot_m = sums / n
        history.append({"epoch": epoch, "loss_ce": ce_m, "loss_se": se_m, "loss_total": tot_m})
        log.debug("epoch %d loss %.5f", epoch, tot_m)

    ckpt = Checkpoint.from_params(
        {k: v.detach() for k, v in params.items()},
        task=cfg.task, class_names=task_classes(cfg.task), fusion_config=fcfg,
        encoder_config=ecfg, schema=schema_, feature_mean=mean, feature_std=std,
    )
    return ckpt, history


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss_ce", "loss_se", "loss_total"])
        for h in history:
            w.writerow([h["epoch"], repr(h["loss_ce"]), repr(h["loss_se"]), repr(h["loss_total"])])


def predict(ckpt: Checkpoint, dataset: Dataset) -> fusion.ModelOutput:
    fcfg = ckpt.fusion_config
    _check_modality(dataset, fcfg)
    cough = ckpt.standardize(dataset.cough) if fcfg.use_cough else None
    tab = dataset.tab if fcfg.use_symptoms else None
    with torch.no_grad():
        return fusion.forward(ckpt.params(), fcfg, ckpt.encoder_config, ckpt.schema,
                              tab, cough, tabular.EVAL)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

METRIC_KEYS = ("f1", "precision", "sensitivity", "specificity", "accuracy")


@dataclass
class MetricsReport:
    class_names: list
    per_class: dict
    overall: dict
    confusion_matrix: list
    top1_accuracy: float
    undefined: list = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return int(np.sum(self.confusion_matrix))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_samples"] = self.n_samples
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", *METRIC_KEYS])
            for name in self.class_names:
                w.writerow([name, *(repr(self.per_class[name][k]) for k in METRIC_KEYS)])
            w.writerow(["overall", *(repr(self.overall[k]) for k in METRIC_KEYS)])


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def _ratio(num, den, tag, undefined):
    if den == 0:
        undefined.append(tag)
        return 0.0
    return float(num / den)


def metrics_from_confusion(cm, class_names) -> MetricsReport:
    """One-vs-rest metrics per class and their unweighted macro-average.

    Rates with a zero denominator are reported as 0 and listed in ``undefined``.
    """
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total == 0:
        raise ValueError("empty test set")
    undefined = []
    per_class = {}
    for c, name in enumerate(class_names):
        tp = int(cm[c, c])
        fn = int(cm[c].sum()) - tp
        fp = int(cm[:, c].sum()) - tp
        tn = total - tp - fn - fp
        precision = _ratio(tp, tp + fp, f"{name}.precision", undefined)
        sensitivity = _ratio(tp, tp + fn, f"{name}.sensitivity", undefined)
        specificity = _ratio(tn, tn + fp, f"{name}.specificity", undefined)
        if precision + sensitivity > 0:
            f1 = 2 * precision * sensitivity / (precision + sensitivity)
        else:
            f1 = 0.0
            undefined.append(f"{name}.f1")
        per_class[name] = {"f1": f1, "precision": precision, "sensitivity": sensitivity,
                           "specificity": specificity, "accuracy": (tp + tn) / total}
    overall = {k: float(np.mean([per_class[n][k] for n in class_names])) for k in METRIC_KEYS}
    return MetricsReport(list(class_names), per_class, overall, cm.tolist(),
                         float(np.trace(cm) / total), undefined)


def evaluate(ckpt: Checkpoint, dataset: Dataset) -> MetricsReport:
    if len(dataset) == 0:
        raise ValueError("empty test set")
    out = predict(ckpt, dataset)
    y_true = task_targets(dataset.labels, ckpt.task)
    y_pred = out.prediction.predicted_class.numpy()
    cm = confusion_matrix(y_true, y_pred, len(ckpt.class_names))
    return metrics_from_confusion(cm, ckpt.class_names)
