from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict

import numpy as np

from ..nn import AdamState, checkpoint

MAX_GRAD_NORM = 5.0


def config_hash(config: Any) -> str:
    d = asdict(config) if hasattr(config, "__dataclass_fields__") else config
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class ModelState:
    """Parameters, optimizer moments and config of one forecaster."""

    kind: str
    config: Any
    params: Dict[str, np.ndarray]
    adam: AdamState = field(default_factory=AdamState)

    def copy(self) -> "ModelState":
        return ModelState(self.kind, self.config, {k: v.copy() for k, v in self.params.items()},
                          self.adam.copy())

    def shapes(self) -> Dict[str, tuple]:
        return {k: v.shape for k, v in self.params.items()}

    def save(self, path: str | Path, extra_meta: Dict[str, Any] | None = None) -> None:
        arrays = dict(self.params)
        for name, m in self.adam.first_moment.items():
            arrays[f"adam.m/{name}"] = m
        for name, v in self.adam.second_moment.items():
            arrays[f"adam.v/{name}"] = v
        meta = {
            "kind": self.kind,
            "config": asdict(self.config),
            "config_hash": config_hash(self.config),
            "adam": {"step": self.adam.step, "learning_rate": self.adam.learning_rate,
                     "beta1": self.adam.beta1, "beta2": self.adam.beta2, "epsilon": self.adam.epsilon},
        }
        meta.update(extra_meta or {})
        checkpoint.save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path: str | Path, config_type, expected_shapes: Dict[str, tuple] | None = None) -> "ModelState":
        arrays, meta = checkpoint.load_checkpoint(path)
        params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
        if expected_shapes is not None:
            for name, shape in expected_shapes.items():
                if name not in params:
                    raise checkpoint.CheckpointError(f"missing parameter {name!r}")
                if params[name].shape != tuple(shape):
                    raise checkpoint.CheckpointError(
                        f"{name}: shape {params[name].shape} != expected {tuple(shape)}")
            extra = sorted(set(params) - set(expected_shapes))
            if extra:
                raise checkpoint.CheckpointError(f"unexpected parameters {extra}")
        a = meta["adam"]
        adam = AdamState(a["learning_rate"], a["beta1"], a["beta2"], a["epsilon"], a["step"],
                         {k[len("adam.m/"):]: v for k, v in arrays.items() if k.startswith("adam.m/")},
                         {k[len("adam.v/"):]: v for k, v in arrays.items() if k.startswith("adam.v/")})
        return cls(meta["kind"], config_type(**meta["config"]), params, adam)
