"""Deterministic RNG streams derived from a single experiment seed.

Every source of randomness (data generation, parameter init, shuffling,
attack starts, ...) pulls a named substream so that runs are bit-identical
for a fixed seed and independent components never share state.
"""

import numpy as np

# fixed registry: names must never be renumbered once results exist
_STREAMS = {
    "data": 1,
    "init": 2,
    "train": 3,
    "attack": 4,
    "eval": 5,
    "probe": 6,
}


def rng_stream(seed, name, index=0):
    """Generator for a named substream; ``index`` splits per-item streams."""
    try:
        tag = _STREAMS[name]
    except KeyError:
        raise ValueError(f"unknown stream {name!r}; known: {sorted(_STREAMS)}") from None
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag, int(index)]))
