"""Seeded random streams.

Every experiment derives its randomness from a single integer seed.  Trial
``i`` of an experiment owns the substream ``SeedSequence(seed,
spawn_key=(i,))`` fed to a PCG64 bit generator, so Monte-Carlo counts do not
depend on trial execution order or on how trials are split across workers.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int | np.random.Generator | None) -> np.random.Generator:
    """Return a PCG64 generator for ``seed``; generators pass through."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        return np.random.Generator(np.random.PCG64())
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def substream(seed: int, index: int) -> np.random.Generator:
    """Independent generator for trial ``index`` of the experiment ``seed``."""
    if index < 0:
        raise ValueError(f"substream index must be >= 0, got {index}")
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.PCG64(ss))
