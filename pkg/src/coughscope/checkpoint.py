"""JSON checkpoint container with base64-encoded float32 tensors."""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .fusion import FusionConfig
from .tabular import EncoderConfig, TabularSchema

SCHEMA_VERSION = 1


def encode_tensor(t) -> dict:
    arr = np.ascontiguousarray(np.asarray(t.detach().cpu() if isinstance(t, torch.Tensor) else t,
                                          dtype="<f4"))
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def decode_tensor(entry: dict) -> np.ndarray:
    raw = base64.b64decode(entry["data"])
    arr = np.frombuffer(raw, dtype="<f4")
    shape = tuple(entry["shape"])
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise ValueError("tensor payload does not match its shape")
    return arr.reshape(shape)


@dataclass
class Checkpoint:
    task: str
    class_names: list
    fusion_config: FusionConfig
    encoder_config: EncoderConfig | None
    schema: TabularSchema | None
    feature_mean: np.ndarray | None
    feature_std: np.ndarray | None
    tensors: dict = field(default_factory=dict)  # name -> float32 ndarray

    @classmethod
    def from_params(cls, params: dict, **kw) -> "Checkpoint":
        tensors = {k: v.detach().cpu().numpy().astype("<f4") for k, v in params.items()}
        return cls(tensors=tensors, **kw)

    def params(self) -> dict:
        """Float64 torch tensors (values are the stored float32 numbers)."""
        return {k: torch.tensor(v, dtype=torch.float64) for k, v in self.tensors.items()}

    def standardize(self, cough: np.ndarray) -> np.ndarray:
        return (np.asarray(cough, dtype=np.float64) - self.feature_mean) / self.feature_std

    def to_dict(self) -> dict:
        stats = None
        if self.feature_mean is not None:
            stats = {"mean": encode_tensor(self.feature_mean), "std": encode_tensor(self.feature_std)}
        return {
            "schema_version": SCHEMA_VERSION,
            "task": self.task,
            "class_names": list(self.class_names),
            "encoder_config": None if self.encoder_config is None else self.encoder_config.__dict__,
            "fusion_config": self.fusion_config.to_dict(),
            "tabular_schema": None if self.schema is None else self.schema.to_dict(),
            "feature_statistics": stats,
            "tensors": {k: encode_tensor(self.tensors[k]) for k in sorted(self.tensors)},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported checkpoint schema_version {d.get('schema_version')}")
        stats = d.get("feature_statistics")
        return cls(
            task=d["task"],
            class_names=list(d["class_names"]),
            fusion_config=FusionConfig.from_dict(d["fusion_config"]),
            encoder_config=None if d["encoder_config"] is None else EncoderConfig.from_dict(d["encoder_config"]),
            schema=None if d["tabular_schema"] is None else TabularSchema.from_dict(d["tabular_schema"]),
            # statistics are kept at float32 precision, like the tensors
            feature_mean=None if stats is None else decode_tensor(stats["mean"]).astype(np.float64),
            feature_std=None if stats is None else decode_tensor(stats["std"]).astype(np.float64),
            tensors={k: decode_tensor(v) for k, v in d["tensors"].items()},
        )

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))
