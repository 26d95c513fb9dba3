"""Deterministic on-disk containers.

Everything an experiment writes (datasets, checkpoints, reports, manifests)
must be byte-identical across reruns, so containers are canonical JSON: keys
sorted, no whitespace variance, floats via repr (shortest exact roundtrip),
NaN/inf rejected, trailing newline.  Arrays are stored as flat row-major
lists with an explicit shape.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def content_hash(obj) -> str:
    """sha256 hex digest of the canonical JSON encoding."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def array_block(arr: np.ndarray) -> dict:
    arr = np.asarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "data": [float(v) for v in arr.reshape(-1)]}


def block_array(block: dict) -> np.ndarray:
    return np.asarray(block["data"], dtype=np.float64).reshape(block["shape"])


def write_json(path, obj) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(canonical_json(obj))
    os.replace(tmp, path)


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
