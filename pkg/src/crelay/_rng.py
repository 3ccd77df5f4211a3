"""Deterministic randomness helpers shared by sender and overhearers.

Parity-sample positions and interleaver permutations must be derivable by
every node that can hear a frame, from nothing but fields carried in the
frame header. splitmix64 in counter mode gives a cheap, vectorizable stream
for the sample positions; interleaver permutations come from a numpy
Generator seeded with the same derived value.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

_U64 = np.uint64


def splitmix64(x: np.ndarray) -> np.ndarray:
    """Finalizing mixer of splitmix64, elementwise over a uint64 array."""
    z = (x + _GOLDEN).astype(np.uint64)
    z = (z ^ (z >> _U64(30))) * _MIX1
    z = (z ^ (z >> _U64(27))) * _MIX2
    return z ^ (z >> _U64(31))


def stream(seed: int, n: int) -> np.ndarray:
    """First n outputs of the counter-mode splitmix64 stream for ``seed``."""
    counters = _U64(seed) + np.arange(1, n + 1, dtype=np.uint64) * _GOLDEN
    return splitmix64(counters)


_DERIVE_INIT = _U64(0xA076_1D64_78BD_642F)


def derive(*parts: int) -> int:
    """Fold integer parts into one 64-bit seed, order sensitive."""
    acc = _DERIVE_INIT
    for p in parts:
        acc = splitmix64(np.uint64([acc ^ _U64(p & 0xFFFF_FFFF_FFFF_FFFF)]))[0]
    return int(acc)


def indices(seed: int, count: int, bound: int) -> np.ndarray:
    """``count`` positions drawn uniformly with replacement from [0, bound)."""
    if bound <= 0:
        raise ValueError("bound must be positive")
    return (stream(seed, count) % _U64(bound)).astype(np.int64)


def derive2_vec(a: np.ndarray, b: int) -> np.ndarray:
    """derive(x, b) for every x in ``a`` at once; matches the scalar fold."""
    acc = splitmix64(_DERIVE_INIT ^ np.asarray(a, dtype=np.uint64))
    return splitmix64(acc ^ _U64(b))


def indices_vec(seeds: np.ndarray, count: int, bound: int) -> np.ndarray:
    """indices() for a whole seed vector: shape (len(seeds), count)."""
    if bound <= 0:
        raise ValueError("bound must be positive")
    counters = seeds[:, None] + np.arange(1, count + 1, dtype=np.uint64) * _GOLDEN
    return (splitmix64(counters) % _U64(bound)).astype(np.int64)
