"""Flat binary tensor archive with a JSON manifest.

A checkpoint is a pair of files: <stem>.bin holds the raw little-endian
tensor bytes back to back; <stem>.json lists, per tensor, its name, shape,
dtype, and byte offset, plus an arbitrary `meta` dict (used for model
hyperparameters).  The format is documented in the README so that any
implementation can reload the weights.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError


def save_tensors(state: dict, stem, meta=None) -> None:
    """Write {name: ndarray} as <stem>.bin + <stem>.json."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(stem.with_suffix(".bin"), "wb") as f:
        for name in sorted(state):
            arr = np.ascontiguousarray(state[name])
            dtype = arr.dtype.newbyteorder("<")
            raw = arr.astype(dtype, copy=False).tobytes()
            entries.append({
                "name": name,
                "shape": list(arr.shape),
                "dtype": dtype.str,
                "offset": offset,
            })
            f.write(raw)
            offset += len(raw)
    manifest = {"tensors": entries, "meta": dict(meta or {})}
    with open(stem.with_suffix(".json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_tensors(stem):
    """Read a checkpoint; returns (state dict, meta dict)."""
    stem = Path(stem)
    try:
        with open(stem.with_suffix(".json")) as f:
            manifest = json.load(f)
        blob = stem.with_suffix(".bin").read_bytes()
    except FileNotFoundError:
        raise
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint {stem}: {exc}") from exc
    state = {}
    for entry in manifest["tensors"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(blob):
            raise FormatError(f"checkpoint {stem}: tensor {entry['name']} out of range")
        state[entry["name"]] = np.frombuffer(
            blob[start:end], dtype=dtype).reshape(shape).copy()
    return state, manifest.get("meta", {})
