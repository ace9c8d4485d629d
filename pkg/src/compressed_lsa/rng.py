"""Seeded random streams.

Every stream is a Philox (counter-based) generator keyed by the base seed
plus a spawn key ``(repeat, client, role)``, so streams never overlap and a
given role sees the same numbers regardless of what other roles consume.
"""

import numpy as np

ROLE_DATA = 0
ROLE_COMPRESSION = 1
ROLE_SHUFFLE = 2
ROLE_PROBLEM = 3
ROLE_MISC = 4


def stream(seed, *key):
    """Return an independent generator for ``seed`` and an integer spawn key."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def as_generator(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        return stream(0)
    return stream(int(rng))
