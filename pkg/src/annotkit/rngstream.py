"""Deterministic RNG stream derivation from a seed plus string/int keys."""
from __future__ import annotations

import zlib

import numpy as np


def key_of(value) -> int:
    """Stable non-negative integer for a stream key component."""
    if isinstance(value, (int, np.integer)):
        return int(value) & 0xFFFFFFFF
    return zlib.crc32(str(value).encode("utf-8"))


def generator(seed: int, *keys) -> np.random.Generator:
    """Independent generator for (seed, keys); identical inputs, identical stream."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [key_of(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed: int, *keys) -> int:
    """64-bit child seed for handing to APIs that take a plain seed."""
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF] + [key_of(k) for k in keys]).generate_state(1, np.uint64)[0])
