"""Counter-based randomness keyed by strings, independent of scheduling."""

from __future__ import annotations

import hashlib

import numpy as np

_SCALE = 2.0**-64


def _digest(*key: object) -> int:
    h = hashlib.blake2b("\x1f".join(map(str, key)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def hash_uniform(*key: object) -> float:
    """Uniform draw in [0, 1) that is a pure function of ``key``."""
    return _digest(*key) * _SCALE


def substream_seed(seed: int, name: str) -> int:
    """Child seed for a named substream (plan, mocks, bootstrap, mi_noise, ...)."""
    return _digest("substream", seed, name) & 0x7FFF_FFFF_FFFF_FFFF


def generator(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream_seed(seed, name))
