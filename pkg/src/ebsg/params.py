"""Walking and serializing parameter trees.

Parameter containers are plain dataclasses whose leaves are tensors.
Field declaration order gives every leaf a stable dotted name, which
the optimizer, the checkpoint format and the gradient audit all share.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad


def named_tensors(obj, prefix: str = "") -> list:
    """Depth-first (name, tensor) pairs in field declaration order."""
    out = []
    for field in dataclasses.fields(obj):
        value = getattr(obj, field.name)
        name = f"{prefix}{field.name}"
        if isinstance(value, ad.Tensor):
            out.append((name, value))
        elif dataclasses.is_dataclass(value):
            out.extend(named_tensors(value, prefix=name + "."))
    return out


def trainable_tensors(obj) -> list:
    return [(name, t) for name, t in named_tensors(obj) if t.requires_grad]


def tree_to_json(obj) -> list:
    """Every tensor leaf as {name, shape, row-major values}."""
    return [
        {"name": name, "shape": list(t.value.shape),
         "values": t.value.reshape(-1).tolist()}
        for name, t in named_tensors(obj)
    ]


def tree_load_json(obj, entries: list) -> None:
    """Restore leaf values in place from tree_to_json output."""
    current = dict(named_tensors(obj))
    seen = set()
    for entry in entries:
        name = entry["name"]
        if name not in current:
            raise KeyError(f"checkpoint parameter {name!r} not in model")
        t = current[name]
        arr = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != t.value.shape:
            raise ValueError(f"parameter {name!r} shape {arr.shape} "
                             f"!= model shape {t.value.shape}")
        t.value = ad._prepare(arr)
        seen.add(name)
    missing = set(current) - seen
    if missing:
        raise KeyError(f"checkpoint is missing parameters: {sorted(missing)}")
