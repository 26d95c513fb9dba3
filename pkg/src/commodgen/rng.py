"""Named, counter-based random streams.

Every stochastic routine in the package draws from a stream obtained via
``rng_for(seed, *names)``.  The stream key is a hash of the seed together
with a path of names ("gbm/sim", "cegen/noise", ...), so adding a new
consumer never perturbs the draws of an existing one, and the same
(seed, names) pair always yields the same sequence on any platform.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, *names: str) -> np.ndarray:
    """Two uint64 words derived from the seed and the name path."""
    if not isinstance(seed, (int, np.integer)):
        raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    tag = "/".join([str(int(seed)), *names]).encode("utf-8")
    digest = hashlib.sha256(tag).digest()
    return np.frombuffer(digest, dtype=np.uint64)[:2].copy()


def rng_for(seed: int, *names: str) -> np.random.Generator:
    """Generator for the named stream; independent per (seed, names)."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *names)))
