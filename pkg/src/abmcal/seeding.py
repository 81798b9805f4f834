"""Deterministic seed derivation.

All stochastic components receive seeds derived from one master seed through
``numpy.random.SeedSequence``, so adding a consumer never shifts another
consumer's stream.
"""

from __future__ import annotations

import zlib

import numpy as np

MASK64 = (1 << 64) - 1


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k) & MASK64


def derive_seed(root: int, *keys) -> int:
    """64-bit seed derived from ``root`` and a path of int/str keys."""
    ss = np.random.SeedSequence(entropy=int(root) & MASK64, spawn_key=tuple(_key(k) for k in keys))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)


def derive_seeds(root: int, n: int, *keys) -> np.ndarray:
    """``n`` child seeds ``derive_seed(root, *keys, i)`` as a uint64 array."""
    return np.array([derive_seed(root, *keys, i) for i in range(n)], dtype=np.uint64)


def rng(root: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *keys))
