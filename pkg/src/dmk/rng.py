"""Portable pseudo-random generator.

Splits and weight initialisation must be reproducible across platforms and
implementations, so they do not use numpy's generators. The generator is
xorshift64* seeded through splitmix64; all arithmetic is modulo 2**64.

Seeding (splitmix64, applied once to the user seed)::

    z = seed + 0x9E3779B97F4A7C15
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    state = z ^ (z >> 31)            # replaced by 1 if it comes out 0

Step (xorshift64*)::

    x ^= x >> 12
    x ^= x << 25
    x ^= x >> 27
    output = x * 0x2545F4914F6CDD1D

Floats use the top 53 bits of the output: ``(output >> 11) * 2**-53``.
Bounded integers use ``output % n``; the bias is below 2**-40 for every n
this package draws.
"""

from __future__ import annotations

from typing import MutableSequence, TypeVar

import numpy as np

MASK64 = (1 << 64) - 1
T = TypeVar("T")


def splitmix64(seed: int) -> int:
    z = (seed + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class XorShift64Star:
    def __init__(self, seed: int):
        self.state = splitmix64(int(seed) & MASK64) or 1

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & MASK64

    def random(self) -> float:
        """Uniform float in [0, 1)."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("n must be positive")
        return self.next_u64() % n

    def uniform_array(self, low: float, high: float, count: int) -> np.ndarray:
        span = high - low
        out = np.empty(count, dtype=np.float64)
        for i in range(count):
            out[i] = low + span * self.random()
        return out

    def shuffle(self, items: MutableSequence[T]) -> None:
        """In-place Fisher-Yates shuffle, walking from the end."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> list[int]:
        order = list(range(n))
        self.shuffle(order)
        return order
