"""JSON checkpoints: a versioned map of parameter name to shape and values.

Floats go through ``repr`` in the json module, so a save/load round trip is
bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, Mapping

import numpy as np

FORMAT = "curricast-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def to_dict(params: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "meta": dict(meta or {}),
        "params": {
            name: {"shape": list(arr.shape), "values": np.asarray(arr, dtype=np.float64).ravel().tolist()}
            for name, arr in sorted(params.items())
        },
    }


def from_dict(doc: dict, expected_shapes: Mapping[str, tuple] | None = None):
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"not a checkpoint: format={doc.get('format')!r}")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    params: Dict[str, np.ndarray] = {}
    for name, entry in doc["params"].items():
        shape = tuple(entry["shape"])
        values = np.asarray(entry["values"], dtype=np.float64)
        if values.size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{name}: {values.size} values for shape {shape}")
        params[name] = values.reshape(shape)
    if expected_shapes is not None:
        if set(expected_shapes) != set(params):
            missing = sorted(set(expected_shapes) - set(params))
            extra = sorted(set(params) - set(expected_shapes))
            raise CheckpointError(f"parameter names differ: missing={missing} extra={extra}")
        for name, shape in expected_shapes.items():
            if tuple(shape) != params[name].shape:
                raise CheckpointError(f"{name}: shape {params[name].shape} != expected {tuple(shape)}")
    return params, doc.get("meta", {})


def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray],
                    meta: Mapping[str, Any] | None = None) -> None:
    Path(path).write_text(json.dumps(to_dict(params, meta), sort_keys=True))


def load_checkpoint(path: str | Path, expected_shapes: Mapping[str, tuple] | None = None):
    return from_dict(json.loads(Path(path).read_text()), expected_shapes)
