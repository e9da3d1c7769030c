"""Labeled, reproducible RNG derivation.

Every random stream in the package is derived from a single integer seed
plus a chain of purpose labels, so independent subsystems never share or
reorder draws.
"""
from __future__ import annotations

import zlib

import numpy as np


def derive_rng(seed: int, *labels) -> np.random.Generator:
    """Return a Generator keyed by (seed, labels).

    Labels may be strings or ints; strings are hashed with crc32 so the
    derivation is stable across platforms and sessions.
    """
    keys = [int(seed) & 0xFFFFFFFF]
    for label in labels:
        if isinstance(label, (int, np.integer)):
            keys.append(int(label) & 0xFFFFFFFF)
        else:
            keys.append(zlib.crc32(str(label).encode("utf-8")))
    return np.random.default_rng(np.random.SeedSequence(keys))
