"""Cough-feature encoder, embedding fusion, classification head and losses."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from . import tabular
from .features import AGGREGATE_NAMES
from .tabular import EncoderConfig, TabularInput, TabularSchema

PROB_FLOOR = 1e-12

TASKS = {
    # task: (use_cough, use_symptoms, multiclass)
    "cough_only": (True, False, False),
    "symptoms_only": (False, True, False),
    "both_binary": (True, True, False),
    "both_multiclass": (True, True, True),
}


@dataclass(frozen=True)
class FusionConfig:
    input_dim: int = len(AGGREGATE_NAMES)
    hidden1: int = 64
    hidden2: int = 32
    embed_dim: int = 16
    num_classes: int = 2
    use_cough: bool = True
    use_symptoms: bool = True
    alpha: float = 0.01

    def __post_init__(self):
        if not (self.use_cough or self.use_symptoms):
            raise ValueError("at least one modality must be enabled")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not 0 <= self.alpha < 1:
            raise ValueError("alpha must lie in [0, 1)")

    @property
    def binary(self) -> bool:
        return self.num_classes == 2

    @property
    def n_outputs(self) -> int:
        return 1 if self.binary else self.num_classes

    @classmethod
    def for_task(cls, task: str, **overrides) -> "FusionConfig":
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}; choose from {sorted(TASKS)}")
        use_cough, use_symptoms, multi = TASKS[task]
        kw = dict(use_cough=use_cough, use_symptoms=use_symptoms, num_classes=4 if multi else 2)
        kw.update(overrides)
        if not use_symptoms:
            kw["alpha"] = 0.0
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Prediction:
    logits: torch.Tensor
    probabilities: torch.Tensor
    predicted_class: torch.Tensor

    def class_probabilities(self) -> torch.Tensor:
        """B x num_classes probabilities, also for the single-logit binary head."""
        if self.probabilities.dim() == 1:
            return torch.stack([1 - self.probabilities, self.probabilities], dim=1)
        return self.probabilities


@dataclass
class ModelOutput:
    prediction: Prediction
    masks: list
    contributions: torch.Tensor | None
    symptom_embedding: torch.Tensor | None
    cough_embedding: torch.Tensor | None


def _uniform(gen, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound


def init_params(fcfg: FusionConfig, ecfg: EncoderConfig | None = None,
                schema: TabularSchema | None = None, seed: int = 0) -> dict:
    """Fresh float64 parameters for the enabled branches and the head."""
    gen = torch.Generator().manual_seed(int(seed))
    params: dict[str, torch.Tensor] = {}
    widths = [fcfg.input_dim, fcfg.hidden1, fcfg.hidden2, fcfg.embed_dim]
    head_in = 0
    if fcfg.use_cough:
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            params[f"cough.{i}.weight"] = _uniform(gen, n_in, (n_in, n_out))
            params[f"cough.{i}.bias"] = torch.zeros(n_out, dtype=torch.float64)
        head_in += fcfg.embed_dim
    if fcfg.use_symptoms:
        ecfg = ecfg or EncoderConfig(output_dim=fcfg.embed_dim)
        if ecfg.output_dim != fcfg.embed_dim:
            raise ValueError("symptom and cough embeddings must share a width")
        params.update(tabular.init_encoder_params(ecfg, schema or TabularSchema(), gen))
        head_in += fcfg.embed_dim
    params["head.weight"] = _uniform(gen, head_in, (head_in, fcfg.n_outputs))
    params["head.bias"] = torch.zeros(fcfg.n_outputs, dtype=torch.float64)
    return params


def cough_encoder(x, params, mode=tabular.EVAL) -> torch.Tensor:
    """Three linear layers, ReLU after the first two; the last stays linear."""
    del mode  # no batch-dependent layers in this branch
    w0 = params["cough.0.weight"]
    x = torch.as_tensor(x, dtype=w0.dtype)
    if x.dim() != 2 or x.shape[1] != w0.shape[0]:
        raise ValueError(f"cough features must be B x {w0.shape[0]}, got {tuple(x.shape)}")
    h = torch.relu(x @ w0 + params["cough.0.bias"])
    h = torch.relu(h @ params["cough.1.weight"] + params["cough.1.bias"])
    return h @ params["cough.2.weight"] + params["cough.2.bias"]


def fuse_and_classify(symptom_emb, cough_emb, params) -> Prediction:
    parts = [e for e in (symptom_emb, cough_emb) if e is not None]
    if not parts:
        raise ValueError("no embedding to classify")
    if len({p.shape[0] for p in parts}) != 1:
        raise ValueError("embedding batch sizes differ")
    x = torch.cat(parts, dim=1)
    logits = x @ params["head.weight"] + params["head.bias"]
    if logits.shape[1] == 1:
        logits = logits[:, 0]
        probs = torch.sigmoid(logits)
        pred = (probs > 0.5).long()
    else:
        probs = torch.softmax(logits, dim=1)
        # torch.argmax returns the first maximal index, i.e. lowest class on ties
        pred = torch.argmax(logits, dim=1)
    return Prediction(logits, probs, pred)


def forward(params, fcfg: FusionConfig, ecfg: EncoderConfig | None, schema: TabularSchema | None,
            tab: TabularInput | None, cough, mode) -> ModelOutput:
    """Full model: optional symptom branch, optional cough branch, fused head."""
    s_emb = c_emb = contrib = None
    masks = []
    if fcfg.use_symptoms:
        q = tabular.embed_and_normalize(tab, params, schema, mode)
        enc = tabular.forward_steps(q, params, ecfg, mode)
        s_emb, masks, contrib = enc.embedding, enc.masks, enc.contributions
    if fcfg.use_cough:
        c_emb = cough_encoder(cough, params, mode)
    return ModelOutput(fuse_and_classify(s_emb, c_emb, params), masks, contrib, s_emb, c_emb)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _as_tensor(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def categorical_ce(probabilities, target):
    """Mean over the batch of -sum_i y_i log p_i; one-hot targets."""
    p = _as_tensor(probabilities)
    y = _as_tensor(target).to(p.dtype)
    if p.dim() == 1:
        p, y = p[None], y[None]
    return -(y * torch.log(torch.clamp(p, PROB_FLOOR, 1.0))).sum(dim=1).mean()


def binary_ce(probabilities, targets):
    p = torch.clamp(_as_tensor(probabilities), PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = _as_tensor(targets).to(p.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def total_loss(loss_ce, loss_se, alpha: float):
    if not 0 <= alpha < 1:
        raise ValueError("alpha must lie in [0, 1)")
    return (1 - alpha) * loss_ce + alpha * loss_se


def classification_loss(prediction: Prediction, labels):
    labels = torch.as_tensor(labels, dtype=torch.long)
    if prediction.probabilities.dim() == 1:
        return binary_ce(prediction.probabilities, labels)
    onehot = torch.nn.functional.one_hot(labels, prediction.probabilities.shape[1])
    return categorical_ce(prediction.probabilities, onehot)
