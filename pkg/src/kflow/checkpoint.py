"""Self-describing JSON checkpoints.

Floats are written with Python's shortest round-trip repr, so reloading
reproduces every parameter, and therefore every ``log_prob``, bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import Dataset
from .errors import DataError
from .flows import DTYPE, FlowModel
from .training import TrainConfig, build_model

FORMAT = "kflow-checkpoint"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: FlowModel
    config: TrainConfig
    mean: np.ndarray
    std: np.ndarray
    meta: dict

    @property
    def nll_offset(self) -> float:
        return float(np.sum(np.log(self.std)))

    def standardize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def destandardize(self, x):
        return np.asarray(x, dtype=np.float64) * self.std + self.mean


def _tensor_doc(t: torch.Tensor) -> dict:
    if t.dtype == torch.bool:
        return {"dtype": "bool", "shape": list(t.shape), "data": [bool(v) for v in t.reshape(-1).tolist()]}
    if t.dtype == torch.long:
        return {"dtype": "int64", "shape": list(t.shape), "data": t.reshape(-1).tolist()}
    return {"dtype": "float64", "shape": list(t.shape),
            "data": [float(v) for v in t.detach().to(DTYPE).reshape(-1).tolist()]}


def _tensor_from_doc(doc: dict) -> torch.Tensor:
    dtype = {"bool": torch.bool, "int64": torch.long, "float64": DTYPE}[doc["dtype"]]
    return torch.tensor(doc["data"], dtype=dtype).reshape(doc["shape"])


def to_document(model: FlowModel, config: TrainConfig, mean=None, std=None, extra=None) -> dict:
    mean = np.zeros(model.dim) if mean is None else np.asarray(mean, dtype=np.float64)
    std = np.ones(model.dim) if std is None else np.asarray(std, dtype=np.float64)
    return {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "coupling": model.coupling_kind,
        "dim": model.dim,
        "blocks": model.blocks,
        "shared_aux": config.shared_aux,
        "gamma": config.gamma,
        "s_clamp": config.s_clamp,
        "permutations": [p.perm.tolist() for p in model.permutations() if p.kind == "random"],
        "standardization": {"mean": mean.tolist(), "std": std.tolist()},
        "config": config.to_dict(),
        "parameters": {k: _tensor_doc(v) for k, v in model.state_dict().items()},
        "extra": extra or {},
    }


def save_checkpoint(path, model: FlowModel, config: TrainConfig, dataset: Dataset | None = None,
                    extra: dict | None = None) -> Path:
    mean = dataset.mean if dataset is not None else None
    std = dataset.std if dataset is not None else None
    doc = to_document(model, config, mean, std, extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, allow_nan=False) + "\n")
    return path


def from_document(doc: dict) -> Checkpoint:
    if doc.get("format") != FORMAT:
        raise DataError("not a kflow checkpoint")
    if doc.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    config = TrainConfig.from_dict(doc["config"])
    dim = int(doc["dim"])
    if doc["coupling"] == "none":
        model = FlowModel(dim, [], 0)
    else:
        model = build_model(dim, config, permutations=doc["permutations"])
    state = {k: _tensor_from_doc(v) for k, v in doc["parameters"].items()}
    model.load_state_dict(state, strict=True)
    st = doc["standardization"]
    return Checkpoint(model, config, np.asarray(st["mean"], dtype=np.float64),
                      np.asarray(st["std"], dtype=np.float64), doc.get("extra", {}))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such checkpoint: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed checkpoint ({exc})") from None
    return from_document(doc)
