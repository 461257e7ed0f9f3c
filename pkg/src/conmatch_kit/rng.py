"""Counter-based random streams keyed by (seed, purpose, counters...)."""

from __future__ import annotations

import zlib

import numpy as np


def _word(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode())
    key = int(key)
    if key < 0:
        raise ValueError("stream keys must be non-negative")
    return key


def stream_key(seed: int, *keys) -> list[int]:
    words = [_word(seed)]
    for key in keys:
        k = _word(key)
        # split into 32-bit words so 64-bit seeds survive SeedSequence
        words.extend([k & 0xFFFFFFFF, k >> 32])
    return words


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Philox generator whose state depends only on ``(seed, *keys)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(stream_key(seed, *keys))))
