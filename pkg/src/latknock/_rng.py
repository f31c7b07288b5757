"""Deterministic seed derivation.

All random streams in the package derive from a single 64-bit base seed via
SplitMix64 mixing of the base seed with a path of integer labels.  Because
derivation is stateless, parallel and serial executions of the same work units
receive identical streams.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def derive_seed(base_seed: int, *path: int) -> int:
    """Mix ``base_seed`` with a path of non-negative integer labels.

    ``derive_seed(s)`` != s in general; every distinct path yields an
    independent-looking 64-bit seed, and the map is pure.
    """
    x = _splitmix64(base_seed & _MASK)
    for label in path:
        x = _splitmix64(x ^ _splitmix64((int(label) + 1) & _MASK))
    return x


def rng_from(base_seed: int, *path: int) -> np.random.Generator:
    """A fresh PCG64 generator for the stream identified by ``path``."""
    return np.random.default_rng(derive_seed(base_seed, *path))
