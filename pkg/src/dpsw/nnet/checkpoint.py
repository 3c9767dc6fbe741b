"""JSON parameter checkpoints: layer name -> row-major values with shape."""

import json

import numpy as np

from ..errors import DataError

FORMAT = "dpsw-checkpoint"
VERSION = 1


def save_checkpoint(path, params, meta=None):
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "meta": meta or {},
        "params": {
            name: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=np.float64).ravel().tolist()}
            for name, v in sorted(params.items())
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path):
    """Returns ``(params, meta)``; params maps names to float64 arrays."""
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != FORMAT:
        raise DataError(f"{path} is not a {FORMAT} file")
    if payload.get("version") != VERSION:
        raise DataError(f"unsupported checkpoint version {payload.get('version')}")
    params = {}
    for name, entry in payload["params"].items():
        arr = np.asarray(entry["data"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if arr.size != int(np.prod(shape)):
            raise DataError(f"parameter {name}: {arr.size} values do not fill shape {shape}")
        params[name] = arr.reshape(shape)
    return params, payload.get("meta", {})
