"""Counter-based random streams.

Every stream is a Philox generator keyed by ``SeedSequence(master,
spawn_key=key)``, so ``stream(seed, trial, step)`` is the same sequence on
every platform and independent of how many other streams were drawn.
"""
from __future__ import annotations

import numpy as np


def stream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def as_generator(rng_seed, *key: int) -> np.random.Generator:
    """Accept an integer seed or an existing generator (used as is)."""
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return stream(0 if rng_seed is None else rng_seed, *key)
