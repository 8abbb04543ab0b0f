"""Seed handling.

Every random draw in the package flows from an explicit integer seed.
Independent streams are derived with :class:`numpy.random.SeedSequence`
using ``spawn_key=(purpose, *indices)``, so a stream is fully determined
by ``(seed, purpose, run index, ...)`` and never by call order.
"""

from __future__ import annotations

import numpy as np

# purpose tags for derived streams
PHASE = 1
SYMBOLS = 2
NOISE = 3
MASK = 4
GA = 5


def derive_seed(seed: int, *keys: int) -> np.random.SeedSequence:
    """Child seed sequence for ``(seed, *keys)``."""
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Generator for the stream identified by ``(seed, *keys)``."""
    return np.random.default_rng(derive_seed(seed, *keys))


def as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
