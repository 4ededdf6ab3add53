# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled kernels: xoshiro256** PRNG and proof-of-work nonce search.

Bit-identical twin of datchain._kernels_py (the pure-Python fallback).
SHA-256 comes from OpenSSL's EVP one-shot interface.
"""

from libc.stdint cimport uint8_t, uint64_t
from libc.string cimport memcpy
from cpython.bytes cimport PyBytes_FromStringAndSize

cdef extern from "openssl/evp.h" nogil:
    ctypedef struct EVP_MD:
        pass
    const EVP_MD *EVP_sha256()
    int EVP_Digest(const void *data, size_t count, unsigned char *md,
                   unsigned int *size, const EVP_MD *type, void *impl)

BACKEND = "cython"

cdef uint64_t _SM_GAMMA = 0x9E3779B97F4A7C15UL


cdef inline uint64_t _splitmix64_out(uint64_t state) nogil:
    cdef uint64_t z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9UL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBUL
    return z ^ (z >> 31)


cdef inline uint64_t _rotl(uint64_t x, int k) nogil:
    return (x << k) | (x >> (64 - k))


cdef class Xoshiro256:
    """xoshiro256** stream seeded from a single 64-bit value."""

    cdef uint64_t s0, s1, s2, s3

    def __init__(self, seed):
        cdef uint64_t sm = <uint64_t> (seed & 0xFFFFFFFFFFFFFFFF)
        sm += _SM_GAMMA
        self.s0 = _splitmix64_out(sm)
        sm += _SM_GAMMA
        self.s1 = _splitmix64_out(sm)
        sm += _SM_GAMMA
        self.s2 = _splitmix64_out(sm)
        sm += _SM_GAMMA
        self.s3 = _splitmix64_out(sm)

    cdef uint64_t _next(self) nogil:
        cdef uint64_t result = _rotl(self.s1 * 5, 7) * 9
        cdef uint64_t t = self.s1 << 17
        self.s2 ^= self.s0
        self.s3 ^= self.s1
        self.s1 ^= self.s2
        self.s0 ^= self.s3
        self.s2 ^= t
        self.s3 = _rotl(self.s3, 45)
        return result

    def next_u64(self):
        return self._next()

    def random(self):
        return <double> (self._next() >> 11) * (2.0 ** -53)

    def randbelow(self, n):
        if n <= 0:
            raise ValueError("randbelow() requires n >= 1")
        cdef uint64_t bound = <uint64_t> n
        return self._next() % bound


cdef inline int _leading_zero_bits(const unsigned char *digest, int length) nogil:
    cdef int bits = 0
    cdef int i
    cdef unsigned char b
    for i in range(length):
        b = digest[i]
        if b == 0:
            bits += 8
            continue
        while not (b & 0x80):
            bits += 1
            b = <unsigned char> (b << 1)
        break
    return bits


def leading_zero_bits(bytes digest):
    """Number of leading zero bits of a byte string."""
    return _leading_zero_bits(<const unsigned char *> digest, len(digest))


def pow_search(bytes prefix, bytes suffix, int difficulty_bits,
               start_nonce, max_iters):
    """Scan nonces upward until SHA-256(prefix || nonce_be64 || suffix)
    has at least difficulty_bits leading zero bits.

    Returns the winning nonce, or -1 after max_iters attempts. Nonces
    wrap modulo 2**64.
    """
    cdef Py_ssize_t npre = len(prefix)
    cdef Py_ssize_t nsuf = len(suffix)
    cdef Py_ssize_t total = npre + 8 + nsuf
    cdef bytes buf = PyBytes_FromStringAndSize(NULL, total)
    cdef unsigned char *p = <unsigned char *> buf
    memcpy(p, <const char *> prefix, npre)
    memcpy(p + npre + 8, <const char *> suffix, nsuf)

    cdef uint64_t nonce = <uint64_t> (start_nonce & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t iters = <uint64_t> max_iters
    cdef uint64_t i
    cdef unsigned char digest[32]
    cdef unsigned int dlen
    cdef int j
    cdef const EVP_MD *md = EVP_sha256()
    cdef bint found = False

    with nogil:
        for i in range(iters):
            for j in range(8):
                p[npre + j] = <unsigned char> (nonce >> (56 - 8 * j))
            EVP_Digest(p, total, digest, &dlen, md, NULL)
            if _leading_zero_bits(digest, 32) >= difficulty_bits:
                found = True
                break
            nonce += 1

    if not found:
        return -1
    return nonce
