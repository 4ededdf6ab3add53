"""Seeded randomness for simulations and tip selection.

All platform randomness flows from a single 64-bit seed through
xoshiro256** (see datchain.kernels). Rng wraps the raw stream with the
collection helpers the simulator needs; derive_seed() splits one seed
into independent labelled sub-streams so that e.g. per-node noise does
not perturb the transaction generator.
"""

from __future__ import annotations

import hashlib
from typing import Sequence, TypeVar

from datchain.kernels import Xoshiro256

T = TypeVar("T")

MASK64 = 0xFFFF_FFFF_FFFF_FFFF


def derive_seed(seed: int, label: str) -> int:
    """Independent 64-bit seed for the given label."""
    digest = hashlib.sha256((seed & MASK64).to_bytes(8, "big") + label.encode("utf-8"))
    return int.from_bytes(digest.digest()[:8], "big")


class Rng:
    """xoshiro256** stream with sampling helpers."""

    def __init__(self, seed: int):
        self._stream = Xoshiro256(seed)

    def next_u64(self) -> int:
        return self._stream.next_u64()

    def random(self) -> float:
        return self._stream.random()

    def randbelow(self, n: int) -> int:
        return self._stream.randbelow(n)

    def randint(self, low: int, high: int) -> int:
        """Uniform integer in [low, high], inclusive."""
        if high < low:
            raise ValueError("randint() requires low <= high")
        return low + self._stream.randbelow(high - low + 1)

    def choice(self, items: Sequence[T]) -> T:
        if not items:
            raise ValueError("choice() on empty sequence")
        return items[self._stream.randbelow(len(items))]

    def sample(self, items: Sequence[T], k: int) -> list[T]:
        """k distinct items, order randomized (partial Fisher-Yates)."""
        if k > len(items):
            raise ValueError("sample() larger than population")
        pool = list(items)
        for i in range(k):
            j = i + self._stream.randbelow(len(pool) - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self._stream.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def bytes(self, n: int) -> bytes:
        out = bytearray()
        while len(out) < n:
            out += self._stream.next_u64().to_bytes(8, "big")
        return bytes(out[:n])

    def bernoulli(self, p: float) -> bool:
        return self._stream.random() < p
