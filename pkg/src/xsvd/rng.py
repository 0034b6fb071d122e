"""Counter-based random numbers for reproducible block-parallel generation.

Every draw is a pure function of (seed, row, position): a splitmix64-style
finalizer hashes a 64-bit counter built from the absolute row index and the
draw offset within that row. Gaussian values come from Box-Muller applied to
pairs of hashed uniforms. Because nothing is sequential, any band of rows can
be generated in any order, under any partition, with identical bits.
"""

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def mix64(x: int) -> int:
    """splitmix64 step on a python int; wraps at 64 bits."""
    x = (x + _GOLDEN) & _MASK
    x ^= x >> 30
    x = (x * _MIX1) & _MASK
    x ^= x >> 27
    x = (x * _MIX2) & _MASK
    return x ^ (x >> 31)


def _mix_array(x: np.ndarray) -> np.ndarray:
    # same finalizer, vectorized; uint64 array ops wrap silently
    x = x + np.uint64(_GOLDEN)
    x ^= x >> np.uint64(30)
    x *= np.uint64(_MIX1)
    x ^= x >> np.uint64(27)
    x *= np.uint64(_MIX2)
    return x ^ (x >> np.uint64(31))


def uniform_bits(seed: int, row: int, count: int) -> np.ndarray:
    """`count` hashed uint64 words for (seed, row), offsets 0..count-1.

    Rows own disjoint counter windows (row << 32 | offset), so a row never
    needs more than 2^32 draws and rows never collide below 2^32 rows; the
    seed is folded in before hashing.
    """
    base = (mix64(seed) ^ ((row & 0xFFFFFFFF) << 32)) & _MASK
    ctr = np.uint64(base) + np.arange(count, dtype=np.uint64)
    return _mix_array(ctr)


def gaussian_row(seed: int, row: int, n: int) -> np.ndarray:
    """One row of n standard normal float64 draws for (seed, row)."""
    pairs = (n + 1) // 2
    bits = uniform_bits(seed, row, 2 * pairs)
    # u1 in (0, 1] so log is finite; u2 in [0, 1)
    u1 = ((bits[:pairs] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0 ** -53
    u2 = (bits[pairs:] >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
    radius = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * pairs)
    out[0::2] = radius * np.cos(theta)
    out[1::2] = radius * np.sin(theta)
    return out[:n]


def gaussian_band(seed: int, row0: int, row1: int, n: int) -> np.ndarray:
    """Rows [row0, row1) of an n-column standard normal matrix."""
    out = np.empty((row1 - row0, n))
    for i in range(row0, row1):
        out[i - row0] = gaussian_row(seed, i, n)
    return out
