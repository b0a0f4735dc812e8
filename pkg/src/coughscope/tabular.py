"""Sparse attentive encoder for symptom and demographic records.

The encoder follows the sequential decision-step design: each step builds a
sparsemax attention mask over the normalized input columns, feeds the masked
features through a feature transformer and splits the result into a decision
part ``d`` and an attention part ``a`` that drives the next mask.

Parameters live in a flat ``dict[str, torch.Tensor]``; batch-norm running
statistics are stored alongside them under ``*.running_mean`` / ``*.running_var``
and are updated in place in training mode.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

SYMPTOM_FLAGS = (
    "fever", "dry_cough", "sore_throat", "headache", "body_aches",
    "chest_pain", "dizziness_confusion", "breathlessness", "fatigue",
)
CONDITION_FLAGS = ("asthma_history", "diabetes", "hypertension")
FLAG_FIELDS = SYMPTOM_FLAGS + CONDITION_FLAGS
GENDERS = ("female", "male", "other")
RECORD_FIELDS = ("age", "gender") + FLAG_FIELDS

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
LOSS_EPS = 1e-8
TRAIN, EVAL = "train", "eval"


class SchemaError(ValueError):
    """A record does not fit the closed symptom schema."""


@dataclass(frozen=True)
class SymptomRecord:
    age: float
    gender: str
    fever: int = 0
    dry_cough: int = 0
    sore_throat: int = 0
    headache: int = 0
    body_aches: int = 0
    chest_pain: int = 0
    dizziness_confusion: int = 0
    breathlessness: int = 0
    fatigue: int = 0
    asthma_history: int = 0
    diabetes: int = 0
    hypertension: int = 0

    def __post_init__(self):
        if not 0 <= self.age <= 120:
            raise SchemaError(f"age {self.age} outside [0, 120]")
        if self.gender not in GENDERS:
            raise SchemaError(f"unknown gender level {self.gender!r}")
        for name in FLAG_FIELDS:
            if getattr(self, name) not in (0, 1):
                raise SchemaError(f"{name} must be 0 or 1")

    @classmethod
    def from_strings(cls, row: dict) -> "SymptomRecord":
        missing = [f for f in RECORD_FIELDS if f not in row or row[f] == ""]
        if missing:
            raise SchemaError(f"missing fields: {missing}")
        try:
            kwargs = {"age": float(row["age"]), "gender": row["gender"]}
            kwargs.update({f: int(row[f]) for f in FLAG_FIELDS})
        except ValueError as exc:
            raise SchemaError(str(exc)) from exc
        return cls(**kwargs)

    def as_row(self) -> dict:
        row = asdict(self)
        age = row["age"]
        row["age"] = int(age) if float(age).is_integer() else age
        return row


def read_symptom_csv(path) -> list[SymptomRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        unknown = [c for c in header if c not in RECORD_FIELDS]
        if unknown:
            raise SchemaError(f"{path}: unknown columns {unknown}")
        if set(header) != set(RECORD_FIELDS):
            raise SchemaError(f"{path}: missing columns {sorted(set(RECORD_FIELDS) - set(header))}")
        return [SymptomRecord.from_strings(row) for row in reader]


def write_symptom_csv(path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(RECORD_FIELDS), lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow(r.as_row())


@dataclass(frozen=True)
class TabularSchema:
    """Column layout of the encoded batch: numeric columns then embeddings."""

    numeric: tuple = ("age",) + FLAG_FIELDS
    categorical: tuple = (("gender", GENDERS),)
    embed_dim: int = 4

    @property
    def width(self) -> int:
        return len(self.numeric) + self.embed_dim * len(self.categorical)

    @property
    def field_names(self) -> list[str]:
        return list(self.numeric) + [name for name, _ in self.categorical]

    def column_fields(self) -> list[str]:
        """Source field of every encoded column, in column order."""
        cols = list(self.numeric)
        for name, _ in self.categorical:
            cols += [name] * self.embed_dim
        return cols

    def to_dict(self) -> dict:
        return {"numeric": list(self.numeric),
                "categorical": [[n, list(levels)] for n, levels in self.categorical],
                "embed_dim": self.embed_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "TabularSchema":
        return cls(tuple(d["numeric"]),
                   tuple((n, tuple(levels)) for n, levels in d["categorical"]),
                   int(d["embed_dim"]))


@dataclass(frozen=True)
class TabularInput:
    """Raw model input: numeric matrix (B x n_numeric) and level codes (B x n_cat)."""

    numeric: np.ndarray
    codes: np.ndarray

    def __len__(self):
        return self.numeric.shape[0]

    def subset(self, idx) -> "TabularInput":
        return TabularInput(self.numeric[idx], self.codes[idx])


def encode_records(records, schema: TabularSchema = TabularSchema()) -> TabularInput:
    """Map records (``SymptomRecord`` or plain dicts) onto the schema."""
    if len(records) == 0:
        raise SchemaError("empty batch")
    numeric = np.zeros((len(records), len(schema.numeric)))
    codes = np.zeros((len(records), len(schema.categorical)), dtype=np.int64)
    for b, rec in enumerate(records):
        get = rec.get if isinstance(rec, dict) else (lambda k, r=rec: getattr(r, k))
        for j, name in enumerate(schema.numeric):
            numeric[b, j] = float(get(name))
        for j, (name, levels) in enumerate(schema.categorical):
            level = get(name)
            if level not in levels:
                raise SchemaError(f"unknown level {level!r} for {name}")
            codes[b, j] = levels.index(level)
    return TabularInput(numeric, codes)


@dataclass(frozen=True)
class EncoderConfig:
    n_steps: int = 3
    n_d: int = 8
    n_a: int = 8
    gamma: float = 1.3
    virtual_batch_size: int = 128
    epsilon: float = LOSS_EPS
    output_dim: int = 16

    def __post_init__(self):
        if self.n_steps < 1 or self.n_d < 1 or self.n_a < 1:
            raise ValueError("n_steps, n_d and n_a must be >= 1")
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if self.virtual_batch_size < 1:
            raise ValueError("virtual_batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Mask:
    values: torch.Tensor
    step_index: int


@dataclass
class StepOutput:
    d: torch.Tensor
    a: torch.Tensor


@dataclass
class EncoderOutput:
    d_out: torch.Tensor
    masks: list = field(default_factory=list)
    embedding: torch.Tensor | None = None
    # per-sample decision contribution of every step, B x n_steps
    contributions: torch.Tensor | None = None


# ---------------------------------------------------------------------------
# Parameter initialization
# ---------------------------------------------------------------------------

def _uniform(gen, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound


def _add_bn(params, prefix, width, affine=True):
    params[f"{prefix}.running_mean"] = torch.zeros(width, dtype=torch.float64)
    params[f"{prefix}.running_var"] = torch.ones(width, dtype=torch.float64)
    if affine:
        params[f"{prefix}.weight"] = torch.ones(width, dtype=torch.float64)
        params[f"{prefix}.bias"] = torch.zeros(width, dtype=torch.float64)


def _add_glu(params, gen, prefix, n_in, n_out):
    params[f"{prefix}.fc"] = _uniform(gen, n_in, (n_in, 2 * n_out))
    _add_bn(params, f"{prefix}.bn", 2 * n_out)


def init_encoder_params(cfg: EncoderConfig, schema: TabularSchema, gen: torch.Generator) -> dict:
    params: dict[str, torch.Tensor] = {}
    for name, levels in schema.categorical:
        params[f"embed.{name}"] = torch.randn(len(levels), schema.embed_dim,
                                              generator=gen, dtype=torch.float64)
    _add_bn(params, "input_bn", schema.width, affine=False)
    width = cfg.n_d + cfg.n_a
    # shared blocks share their FC weights; each step keeps its own batch norm
    params["ft.shared.0.fc"] = _uniform(gen, schema.width, (schema.width, 2 * width))
    params["ft.shared.1.fc"] = _uniform(gen, width, (width, 2 * width))
    for step in range(cfg.n_steps + 1):
        for j in range(2):
            _add_bn(params, f"ft.step{step}.shared{j}.bn", 2 * width)
        for j in range(2):
            _add_glu(params, gen, f"ft.step{step}.{j}", width, width)
        if step > 0:
            params[f"att.step{step}.fc"] = _uniform(gen, cfg.n_a, (cfg.n_a, schema.width))
            _add_bn(params, f"att.step{step}.bn", schema.width)
    params["enc_out.weight"] = _uniform(gen, cfg.n_d, (cfg.n_d, cfg.output_dim))
    params["enc_out.bias"] = torch.zeros(cfg.output_dim, dtype=torch.float64)
    return params


def is_buffer(name: str) -> bool:
    return name.endswith(".running_mean") or name.endswith(".running_var")


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def _normalize(x, params, prefix, mode, momentum=BN_MOMENTUM):
    if mode == TRAIN:
        mean = x.mean(dim=0)
        var = x.var(dim=0, unbiased=False)
        with torch.no_grad():
            rm, rv = params[f"{prefix}.running_mean"], params[f"{prefix}.running_var"]
            rm.mul_(momentum).add_(mean.detach().to(rm.dtype), alpha=1 - momentum)
            rv.mul_(momentum).add_(var.detach().to(rv.dtype), alpha=1 - momentum)
    elif mode == EVAL:
        mean = params[f"{prefix}.running_mean"]
        var = params[f"{prefix}.running_var"]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    out = (x - mean) / torch.sqrt(var + BN_EPS)
    weight = params.get(f"{prefix}.weight")
    if weight is not None:
        out = out * weight + params[f"{prefix}.bias"]
    return out


def batch_norm(x, params, prefix, mode):
    return _normalize(x, params, prefix, mode)


def ghost_batch_norm(x, params, prefix, virtual_batch_size, mode):
    """Batch norm applied independently to consecutive virtual sub-batches."""
    if mode == EVAL or x.shape[0] <= virtual_batch_size:
        return _normalize(x, params, prefix, mode)
    chunks = torch.split(x, virtual_batch_size, dim=0)
    return torch.cat([_normalize(c, params, prefix, mode) for c in chunks], dim=0)


def embed_and_normalize(inputs: TabularInput, params, schema: TabularSchema, mode) -> torch.Tensor:
    """Concatenate numeric columns with categorical embeddings, then batch-normalize."""
    if len(inputs) == 0:
        raise SchemaError("empty batch")
    ref = params["input_bn.running_mean"]
    cols = [torch.as_tensor(inputs.numeric, dtype=ref.dtype)]
    for j, (name, levels) in enumerate(schema.categorical):
        codes = torch.as_tensor(inputs.codes[:, j], dtype=torch.long)
        if codes.numel() and (codes.min() < 0 or codes.max() >= len(levels)):
            raise SchemaError(f"level code out of range for {name}")
        cols.append(params[f"embed.{name}"][codes])
    return batch_norm(torch.cat(cols, dim=1), params, "input_bn", mode)


class _Sparsemax(torch.autograd.Function):
    @staticmethod
    def forward(ctx, z):
        zs, _ = torch.sort(z, dim=-1, descending=True)
        k = torch.arange(1, z.shape[-1] + 1, dtype=z.dtype, device=z.device)
        cs = zs.cumsum(dim=-1)
        support = (1 + k * zs) > cs
        k_z = support.sum(dim=-1, keepdim=True)
        tau = (cs.gather(-1, k_z - 1) - 1) / k_z.to(z.dtype)
        out = torch.clamp(z - tau, min=0)
        ctx.save_for_backward(out)
        return out

    @staticmethod
    def backward(ctx, grad):
        (out,) = ctx.saved_tensors
        s = (out > 0).to(grad.dtype)
        v_hat = (grad * s).sum(dim=-1, keepdim=True) / s.sum(dim=-1, keepdim=True)
        return s * (grad - v_hat)


def sparsemax(z):
    """Euclidean projection of each row of ``z`` onto the probability simplex.

    Accepts a torch tensor (differentiable) or anything array-like (returns numpy).
    """
    as_numpy = not isinstance(z, torch.Tensor)
    t = torch.as_tensor(np.asarray(z, dtype=np.float64)) if as_numpy else z
    if not torch.all(torch.isfinite(t)):
        raise ValueError("sparsemax input must be finite")
    out = _Sparsemax.apply(t)
    return out.numpy() if as_numpy else out


class _CappedSparsemax(torch.autograd.Function):
    @staticmethod
    def forward(ctx, z, cap):
        # f(tau) = sum clip(z - tau, 0, cap) is piecewise linear and nonincreasing;
        # its breakpoints are z - cap and z.
        bp, _ = torch.sort(torch.cat([z - cap, z], dim=-1), dim=-1)
        f = torch.clamp(z.unsqueeze(-2) - bp.unsqueeze(-1), min=0)
        f = torch.minimum(f, cap.unsqueeze(-2)).sum(dim=-1)
        k = ((f >= 1).sum(dim=-1, keepdim=True) - 1).clamp(min=0, max=bp.shape[-1] - 2)
        t0, t1 = bp.gather(-1, k), bp.gather(-1, k + 1)
        f0, f1 = f.gather(-1, k), f.gather(-1, k + 1)
        span = f0 - f1
        frac = torch.where(span > 0, (f0 - 1) / torch.where(span > 0, span, torch.ones_like(span)),
                           torch.zeros_like(span))
        tau = t0 + frac * (t1 - t0)
        out = torch.minimum(torch.clamp(z - tau, min=0), cap)
        ctx.save_for_backward(out, cap)
        return out

    @staticmethod
    def backward(ctx, grad):
        out, cap = ctx.saved_tensors
        free = ((out > 0) & (out < cap)).to(grad.dtype)
        capped = ((out >= cap) & (cap > 0)).to(grad.dtype)
        n_free = free.sum(dim=-1, keepdim=True)
        g_hat = (grad * free).sum(dim=-1, keepdim=True) / n_free.clamp(min=1)
        return free * (grad - g_hat), capped * (grad - g_hat)


def capped_sparsemax(z, cap):
    """Projection of each row of ``z`` onto ``{m : 0 <= m <= cap, sum(m) = 1}``.

    Reduces to :func:`sparsemax` whenever no cap binds (e.g. all caps >= 1).
    Rows of ``cap`` must sum to at least 1.
    """
    if not torch.all(torch.isfinite(z)):
        raise ValueError("capped_sparsemax input must be finite")
    if torch.any(cap.sum(dim=-1) < 1 - 1e-12):
        raise ValueError("caps leave no feasible point on the simplex")
    return _CappedSparsemax.apply(z, cap)


def glu_block(x, params, prefix, mode, virtual_batch_size=128, bn_prefix=None):
    """FC -> ghost batch norm -> gated linear unit.

    Weights live under ``prefix``; the batch norm under ``bn_prefix`` (default
    ``prefix + ".bn"``), which lets steps share an FC but not its statistics.
    """
    w = params[f"{prefix}.fc"]
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"{prefix}: input has {x.shape[1]} columns, expected {w.shape[0]}")
    bn = bn_prefix or f"{prefix}.bn"
    h = ghost_batch_norm(x @ w, params, bn, virtual_batch_size, mode)
    half = w.shape[1] // 2
    return h[:, :half] * torch.sigmoid(h[:, half:])


_SQRT_HALF = math.sqrt(0.5)


def feature_transformer(x, params, step, cfg: EncoderConfig, mode) -> StepOutput:
    """Two shared and two step-specific GLU blocks with scaled residuals."""
    vbs = cfg.virtual_batch_size
    blocks = [("ft.shared.0", f"ft.step{step}.shared0.bn"),
              ("ft.shared.1", f"ft.step{step}.shared1.bn"),
              (f"ft.step{step}.0", None), (f"ft.step{step}.1", None)]
    h = glu_block(x, params, blocks[0][0], mode, vbs, blocks[0][1])
    for name, bn in blocks[1:]:
        h = (h + glu_block(h, params, name, mode, vbs, bn)) * _SQRT_HALF
    return StepOutput(h[:, :cfg.n_d], h[:, cfg.n_d:])


def attentive_transformer(a_prev, prior, params, step, cfg: EncoderConfig, mode, budget=None):
    """Returns ``(mask, updated_prior)``.

    Scores are scaled by ``prior``. When ``budget`` is given, every mask entry
    is additionally capped by it (see :func:`capped_sparsemax`).
    """
    w = params[f"att.step{step}.fc"]
    if a_prev.shape[1] != w.shape[0] or prior.shape[1] != w.shape[1]:
        raise ValueError(f"att.step{step}: shape mismatch")
    h = ghost_batch_norm(a_prev @ w, params, f"att.step{step}.bn", cfg.virtual_batch_size, mode)
    scores = h * prior
    m = sparsemax(scores) if budget is None else capped_sparsemax(scores, budget)
    return Mask(m, step), prior * (cfg.gamma - m)


def forward_steps(q, params, cfg: EncoderConfig, mode) -> EncoderOutput:
    """Run the decision steps on a normalized batch ``q`` (B x D).

    An initial feature-transformer pass over the unmasked features provides the
    attention input of the first step; its decision half is discarded. Each
    feature carries a budget of ``gamma`` mask mass across all steps.
    """
    if q.shape[1] * cfg.gamma < cfg.n_steps:
        raise ValueError("n_steps exceeds the total mask budget D * gamma")
    prior = torch.ones_like(q)
    used = torch.zeros_like(q)
    a = feature_transformer(q, params, 0, cfg, mode).a
    d_out = torch.zeros(q.shape[0], cfg.n_d, dtype=q.dtype)
    masks, contrib = [], []
    for step in range(1, cfg.n_steps + 1):
        budget = torch.clamp(cfg.gamma - used, min=0.0)
        mask, prior = attentive_transformer(a, prior, params, step, cfg, mode, budget)
        used = used + mask.values
        out = feature_transformer(mask.values * q, params, step, cfg, mode)
        relu_d = torch.relu(out.d)
        d_out = d_out + relu_d
        contrib.append(relu_d.sum(dim=1))
        masks.append(mask)
        a = out.a
    embedding = d_out @ params["enc_out.weight"] + params["enc_out.bias"]
    return EncoderOutput(d_out, masks, embedding, torch.stack(contrib, dim=1))


def sparsity_loss(masks, epsilon: float = LOSS_EPS):
    """Mean per-row entropy of the masks, averaged over steps and batch."""
    if not masks:
        raise ValueError("no masks")
    vals = [m.values if isinstance(m, Mask) else torch.as_tensor(m) for m in masks]
    n_steps, batch = len(vals), vals[0].shape[0]
    total = sum((-v * torch.log(v + epsilon)).sum() for v in vals)
    return total / (n_steps * batch)
