"""Deterministic RNG splitting.

All randomness in a run flows from one root seed. Substreams are derived
by spawning a SeedSequence with a stable integer key per consumer, so
adding a consumer never perturbs the draws of existing ones.
"""

from __future__ import annotations

import zlib

import numpy as np


def child_seed(root_seed: int, *tags) -> int:
    """Stable 63-bit child seed for the given root and tag path."""
    keys = [int(root_seed) & 0x7FFFFFFFFFFFFFFF]
    for tag in tags:
        if isinstance(tag, (int, np.integer)):
            keys.append(int(tag) & 0xFFFFFFFF)
        else:
            keys.append(zlib.crc32(str(tag).encode()))
    seq = np.random.SeedSequence(keys)
    return int(seq.generate_state(1, np.uint64)[0] >> 1)


def rng_for(root_seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng(child_seed(root_seed, *tags))
