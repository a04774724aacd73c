"""Versioned JSON checkpoints for MERA and uniform MPS states.

Each tensor is stored as its isometry matrix with a shape list, a manifold
kind and the entries as base64 of little-endian ``complex128`` (real and
imaginary float64 pairs, row-major). The layout is documented in
``docs/checkpoint_format.md``.
"""

from __future__ import annotations

import base64
import json
import os
from pathlib import Path

import numpy as np

from .manifolds import IsometryPoint, Kind
from .mera import MeraLayer, MeraState
from .mps import UniformMps

FORMAT = "isotn-checkpoint"
VERSION = 1
_DTYPE = np.dtype("<c16")


class CheckpointError(ValueError):
    pass


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype=_DTYPE)
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    shape = tuple(int(s) for s in obj["shape"])
    if len(raw) != _DTYPE.itemsize * int(np.prod(shape)):
        raise CheckpointError(f"tensor data does not match shape {shape}")
    return np.frombuffer(raw, dtype=_DTYPE).reshape(shape).astype(complex)


def _point(p: IsometryPoint, name: str) -> dict:
    return {"name": name, "manifold": p.kind.value, **encode_array(p.W)}


def _load_point(obj: dict) -> IsometryPoint:
    return IsometryPoint(decode_array(obj), Kind(obj["manifold"]))


def to_dict(state, seed=None, meta=None) -> dict:
    out = {"format": FORMAT, "version": VERSION, "seed": seed, "meta": meta or {}}
    if isinstance(state, MeraState):
        tensors = []
        for i, layer in enumerate(state.layers):
            tensors += [_point(layer.u, f"u{i}"), _point(layer.w, f"w{i}")]
        out.update(kind="mera", d_phys=state.d_phys, layer_count=len(state.layers), tensors=tensors)
    elif isinstance(state, UniformMps):
        out.update(kind="mps", d=state.d, D=state.D, tensors=[_point(state.A, "A")])
    else:
        raise TypeError(f"cannot checkpoint {type(state).__name__}")
    return out


def from_dict(obj: dict):
    if obj.get("format") != FORMAT:
        raise CheckpointError("not an isotn checkpoint")
    if obj.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {obj.get('version')}")
    points = [_load_point(t) for t in obj["tensors"]]
    if obj["kind"] == "mera":
        if len(points) != 2 * obj["layer_count"]:
            raise CheckpointError("tensor count does not match layer_count")
        layers = [MeraLayer(points[2 * i], points[2 * i + 1]) for i in range(obj["layer_count"])]
        return MeraState(layers[:-1], layers[-1], int(obj["d_phys"]))
    if obj["kind"] == "mps":
        return UniformMps(points[0], int(obj["d"]), int(obj["D"]))
    raise CheckpointError(f"unknown checkpoint kind {obj['kind']!r}")


def save(path, state, seed=None, meta=None) -> None:
    """Write atomically: a partial file never replaces a good checkpoint."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(to_dict(state, seed, meta), sort_keys=True))
    os.replace(tmp, path)


def load(path):
    return from_dict(json.loads(Path(path).read_text()))
