"""Seed derivation and generator construction.

Every random draw in the package goes through :func:`make_rng`, which wraps
numpy's counter-based Philox bit generator. Sub-seeds for (round, client)
pairs come from :func:`derive_seed`, a splitmix64 chain::

    s = master
    for key in keys:
        s = splitmix64(s ^ splitmix64(key + GOLDEN))

so the seed of client ``m`` in round ``t`` does not depend on how many
clients exist.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    x = (x + GOLDEN) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, *keys: int) -> int:
    s = master & MASK64
    for key in keys:
        s = splitmix64(s ^ splitmix64((key + GOLDEN) & MASK64))
    return s


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed & MASK64))
