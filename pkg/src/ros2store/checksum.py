"""CRC32C (Castagnoli) checksums.

The byte-crunching is delegated to the ``crc32c`` extension module, which
uses SSE4.2 / ARMv8 instructions when present.  ``crc32c_combine`` is the
zlib GF(2) matrix method specialised to the reflected Castagnoli polynomial.
"""

from __future__ import annotations

import crc32c as _crc32c

# reflected form of 0x1EDC6F41
POLY_REFLECTED = 0x82F63B78


def crc32c(data, value: int = 0) -> int:
    """CRC32C of ``data``; pass a previous result as ``value`` to continue it."""
    return _crc32c.crc32c(data, value)


def _gf2_times(mat: list[int], vec: int) -> int:
    out = 0
    i = 0
    while vec:
        if vec & 1:
            out ^= mat[i]
        vec >>= 1
        i += 1
    return out


def _gf2_square(mat: list[int]) -> list[int]:
    return [_gf2_times(mat, mat[n]) for n in range(32)]


def crc32c_combine(crc_a: int, crc_b: int, len_b: int) -> int:
    """Return crc32c(a + b) given crc32c(a), crc32c(b) and len(b)."""
    if len_b <= 0:
        return crc_a
    # operator for one zero bit
    odd = [POLY_REFLECTED] + [1 << n for n in range(31)]
    even = _gf2_square(odd)  # two zero bits
    odd = _gf2_square(even)  # four zero bits
    while True:
        even = _gf2_square(odd)
        if len_b & 1:
            crc_a = _gf2_times(even, crc_a)
        len_b >>= 1
        if not len_b:
            break
        odd = _gf2_square(even)
        if len_b & 1:
            crc_a = _gf2_times(odd, crc_a)
        len_b >>= 1
        if not len_b:
            break
    return crc_a ^ crc_b
