"""Counter-based random streams.

Every sampling operation in the package takes an explicit generator handle.
Handles are numpy Generators backed by Philox (counter-based), derived from
an integer seed plus an optional key path, so independent sub-streams for
parallel work are reproducible regardless of execution order.
"""

from __future__ import annotations

import numpy as np


def rng_from_seed(seed, *key) -> np.random.Generator:
    """Philox generator for ``seed``; extra ints select an independent sub-stream."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def as_generator(seed_or_rng) -> np.random.Generator:
    """Accept either an integer seed or an existing Generator."""
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return rng_from_seed(seed_or_rng)
