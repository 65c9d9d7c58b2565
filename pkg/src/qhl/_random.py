"""Seeded random streams.

Every replication draws from its own counter-based Philox stream keyed by
``(master_seed, index)``, so results never depend on scheduling.
"""

import numbers

import numpy as np


def stream(master_seed, index=None, *sub):
    """Independent generator for replication ``index`` of ``master_seed``.

    Extra ``sub`` keys give further independent streams within a replication.
    """
    spawn_key = () if index is None else (int(index), *map(int, sub))
    ss = np.random.SeedSequence(int(master_seed), spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(ss))


def as_generator(random_state):
    """Coerce ``None`` / int / SeedSequence / Generator into a Generator."""
    if isinstance(random_state, np.random.Generator):
        return random_state
    if random_state is None:
        return np.random.default_rng()
    if isinstance(random_state, numbers.Integral):
        return stream(random_state)
    if isinstance(random_state, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(random_state))
    raise TypeError(f"cannot build a random generator from {random_state!r}")
