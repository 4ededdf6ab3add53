"""Pure-Python kernels: seeded PRNG and proof-of-work nonce search.

Reference implementation of the two hot loops. datchain.kernels selects
the compiled twin (_kernels_cy) when it is importable; both must produce
bit-identical outputs, which tests/test_kernels.py enforces.

PRNG contract (documented in docs/FORMATS.md):
  - algorithm: xoshiro256** with the 64-bit seed expanded to the 256-bit
    state through four SplitMix64 steps
  - random() is (next_u64() >> 11) * 2**-53
  - randbelow(n) is next_u64() % n (modulo bias is irrelevant at the
    n << 2**64 scales used here and keeps the stream portable)
"""

from __future__ import annotations

import hashlib

BACKEND = "pure-python"

_MASK = 0xFFFF_FFFF_FFFF_FFFF


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


class Xoshiro256:
    """xoshiro256** stream seeded from a single 64-bit value."""

    __slots__ = ("s0", "s1", "s2", "s3")

    def __init__(self, seed: int):
        sm = seed & _MASK
        sm, self.s0 = _splitmix64(sm)
        sm, self.s1 = _splitmix64(sm)
        sm, self.s2 = _splitmix64(sm)
        sm, self.s3 = _splitmix64(sm)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s0, self.s1, self.s2, self.s3
        result = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s0, self.s1, self.s2, self.s3 = s0, s1, s2, s3
        return result

    def random(self) -> float:
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("randbelow() requires n >= 1")
        return self.next_u64() % n


def leading_zero_bits(digest: bytes) -> int:
    """Number of leading zero bits of a byte string."""
    bits = 0
    for byte in digest:
        if byte == 0:
            bits += 8
            continue
        while not byte & 0x80:
            bits += 1
            byte <<= 1
        break
    return bits


def pow_search(
    prefix: bytes,
    suffix: bytes,
    difficulty_bits: int,
    start_nonce: int,
    max_iters: int,
) -> int:
    """Scan nonces upward until SHA-256(prefix || nonce_be64 || suffix)
    has at least difficulty_bits leading zero bits.

    Returns the winning nonce, or -1 after max_iters attempts. Nonces
    wrap modulo 2**64.
    """
    base = hashlib.sha256(prefix)
    nonce = start_nonce & _MASK
    for _ in range(max_iters):
        h = base.copy()
        h.update(nonce.to_bytes(8, "big"))
        h.update(suffix)
        if leading_zero_bits(h.digest()) >= difficulty_bits:
            return nonce
        nonce = (nonce + 1) & _MASK
    return -1
