"""JSON checkpoints: module class, constructor config, named parameter
shapes and flat values, plus a format version."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


def to_dict(module) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "class": type(module).__name__,
        "config": module.config,
        "params": {name: {"shape": list(p.shape), "values": p.value.ravel().tolist()}
                   for name, p in module.parameters().items()},
    }


def save(module, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # repr-exact floats keep the round trip bitwise
    path.write_text(json.dumps(to_dict(module)), encoding="utf-8")
    return path


def from_dict(d: dict):
    from . import layers

    if d.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('format_version')}")
    cls = getattr(layers, d["class"])
    module = cls(**d["config"])
    params = module.parameters()
    if set(params) != set(d["params"]):
        raise ValueError("checkpoint parameters do not match the module")
    for name, p in params.items():
        entry = d["params"][name]
        p.value = np.array(entry["values"], dtype=float).reshape(entry["shape"])
    return module


def load(path):
    return from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def copy_module(module):
    """Deep copy through the checkpoint representation."""
    return from_dict(to_dict(module))
