"""IEEE 754-2008 binary16 conversion.

Storage layout (msb first):

    seeeeemmmmmmmmmm    1 sign bit, 5 exponent bits (bias 15), 10 significand bits

    0x3C00  1.0
    0xC000  -2.0
    0x7C00  +inf
    0x0000  +0.0

Half precision is a storage format only: arrays are widened to single (or
double) before any arithmetic. The scalar codec here is the reference
implementation; bulk conversions go through numpy's float16, which encodes
identically and is cross-checked against this codec in the tests.

Rounding is round-to-nearest-even. Values above the largest finite half
(65504) encode to signed infinity.
"""

import struct

import numpy as np

EXP_MASK = 0x7C00
SIG_MASK = 0x03FF
MAX_FINITE = 65504.0
MIN_NORMAL = 2.0 ** -14


def _round_shift_even(x: int, shift: int) -> int:
    """Right-shift x by `shift` bits, rounding the dropped bits to nearest even."""
    if shift <= 0:
        return x << -shift
    half = 1 << (shift - 1)
    q = x >> shift
    rem = x & ((1 << shift) - 1)
    if rem > half or (rem == half and (q & 1)):
        q += 1
    return q


def half_encode(value: float) -> int:
    """Encode a python float to a binary16 bit pattern (int in [0, 0xFFFF]).

    The value is first narrowed to single precision, then to half with
    round-to-nearest-even, so the result matches a single->half hardware
    conversion of the nearest single.
    """
    bits = struct.unpack("<I", struct.pack("<f", value))[0]
    sign = (bits >> 16) & 0x8000
    exp = (bits >> 23) & 0xFF
    sig = bits & 0x007FFFFF

    if exp == 0xFF:
        if sig == 0:
            return sign | EXP_MASK
        # NaN: keep the top significand bits, force quiet, never collapse to inf
        return sign | EXP_MASK | 0x0200 | (sig >> 13)

    e16 = exp - 127 + 15
    if e16 >= 31:
        return sign | EXP_MASK
    if e16 <= 0:
        if e16 < -10:
            return sign  # underflows to signed zero (shift would drop everything)
        # subnormal result: value * 2^24 with the leading 1 made explicit
        h = _round_shift_even(0x00800000 | sig, 126 - exp)
        return sign | h  # h == 1024 spills into exponent 1, which is correct
    q = _round_shift_even(sig, 13)
    if q == 0x0400:
        q = 0
        e16 += 1
        if e16 >= 31:
            return sign | EXP_MASK
    return sign | (e16 << 10) | q


def half_decode(pattern: int) -> float:
    """Decode a binary16 bit pattern to a python float. Exact (widening)."""
    sign = -1.0 if pattern & 0x8000 else 1.0
    exp = (pattern >> 10) & 0x1F
    sig = pattern & SIG_MASK
    if exp == 0x1F:
        if sig:
            return float("nan")
        return sign * float("inf")
    if exp == 0:
        return sign * sig * 2.0 ** -24
    return sign * (1024 + sig) * 2.0 ** (exp - 25)


def encode_array(values: np.ndarray) -> np.ndarray:
    """Bulk narrow to half; returns the raw uint16 patterns."""
    return np.asarray(values).astype(np.float16).view(np.uint16)


def decode_array(patterns: np.ndarray) -> np.ndarray:
    """Bulk widen half patterns to float32. Exact."""
    return np.asarray(patterns, dtype=np.uint16).view(np.float16).astype(np.float32)
