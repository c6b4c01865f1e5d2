"""Parameter checkpoints as a versioned JSON map.

Layout (UTF-8 JSON, keys sorted)::

    {
      "format": "read-forge-params",
      "version": 1,
      "params": {
        "<name>": {"shape": [d0, d1, ...], "data": [x0, x1, ...]},
        ...
      }
    }

``data`` holds the row-major values; each float is written with Python's
shortest round-tripping representation, so save/load is lossless in 64-bit.
Backbone weights use their plain names; side-network weights live under the
``read.`` prefix and PETL additions under ``lora.``, ``adapter.`` or
``prompt.``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor

FORMAT = "read-forge-params"
VERSION = 1


def params_to_dict(params: dict[str, Tensor | np.ndarray]) -> dict:
    out = {}
    for name in sorted(params):
        arr = np.asarray(params[name].data if isinstance(params[name], Tensor) else params[name],
                         dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"parameter {name} holds non-finite values")
        out[name] = {"shape": list(arr.shape), "data": arr.ravel().tolist()}
    return {"format": FORMAT, "version": VERSION, "params": out}


def params_from_dict(doc: dict) -> dict[str, np.ndarray]:
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise CheckpointError(f"not a {FORMAT} document")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    out = {}
    for name, entry in doc.get("params", {}).items():
        try:
            shape = tuple(int(s) for s in entry["shape"])
            data = np.array(entry["data"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"malformed entry for {name}: {exc}") from None
        if data.size != int(np.prod(shape)):
            raise CheckpointError(f"{name}: shape {shape} does not match {data.size} values")
        out[name] = data.reshape(shape)
    return out


def save_params(path: str | Path, params: dict[str, Tensor | np.ndarray]) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params), sort_keys=True))


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return params_from_dict(doc)


def load_into(params: dict[str, Tensor], arrays: dict[str, np.ndarray], strict: bool = True) -> None:
    """Copy loaded arrays into existing tensors by name (shapes must match)."""
    missing = set(params) - set(arrays)
    if strict and missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for name, tensor in params.items():
        if name not in arrays:
            continue
        if arrays[name].shape != tensor.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arrays[name].shape} != {tensor.shape}")
        tensor.data = arrays[name].copy()
