"""Deterministic RNG derivation.

Every random draw in the package flows from a single integer seed through
tagged sub-streams, so any pipeline stage can be replayed bit-exactly.
String tags are folded to integers with crc32, which is stable across
platforms and interpreter runs.
"""

from __future__ import annotations

import zlib

import numpy as np


def _fold(tag) -> int:
    if isinstance(tag, str):
        return zlib.crc32(tag.encode("utf-8"))
    return int(tag) & 0xFFFFFFFF


def derive_rng(seed: int, *tags) -> np.random.Generator:
    """Generator for the sub-stream identified by (seed, *tags)."""
    entropy = [int(seed) & 0xFFFFFFFF] + [_fold(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed: int, *tags) -> int:
    """Stable 32-bit child seed for handing to APIs that want an int."""
    entropy = [int(seed) & 0xFFFFFFFF] + [_fold(t) for t in tags]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])
