"""Named, splittable random streams.

Every consumer of randomness asks for a generator keyed by ``(seed, name,
*indices)``. Streams with different keys are statistically independent, so
turning on one feature (say, an extra evaluation pass) never shifts the draws
seen by another (the training batches).
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    "init": 1,
    "train": 2,
    "eval": 3,
    "oracle": 4,
    "attack": 5,
    "estimate": 6,
    "check": 7,
}


def stream(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Counter-based (Philox) generator for the stream ``name`` at ``indices``."""
    if name not in STREAMS:
        raise KeyError(f"unknown random stream {name!r}")
    if seed < 0:
        raise ValueError("seed must be non-negative")
    key = (STREAMS[name],) + tuple(int(i) for i in indices)
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))
