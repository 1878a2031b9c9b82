"""Reproducible random streams.

Every stream is a Philox (counter-based) generator keyed by a root seed and
a tuple of integers, so any replicate can be regenerated on its own without
replaying the ones before it.
"""
from __future__ import annotations

import numpy as np

# stream tags
DATA = 0
BOOTSTRAP = 1
PARAMETRIC = 2
GOF = 3


def stream(seed: int, *key: int) -> np.random.Generator:
    """Generator for ``(seed, *key)``; distinct keys give independent streams."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
