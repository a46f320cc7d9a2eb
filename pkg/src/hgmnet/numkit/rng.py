"""Portable seeded random numbers.

The generator is xorshift64*:

    x ^= x >> 12
    x ^= x << 25
    x ^= x >> 27
    out = x * 0x2545F4914F6CDD1D  (mod 2**64)

Seeds are expanded with one round of splitmix64 so that small or zero seeds
still give a well-mixed nonzero state.  Everything is done with Python
integers masked to 64 bits, so the stream is identical on every platform.
"""

from __future__ import annotations

from typing import Sequence, TypeVar

import numpy as np

MASK64 = (1 << 64) - 1
MULTIPLIER = 0x2545F4914F6CDD1D
_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_FALLBACK_STATE = 0x853C49E6748FEA9B

T = TypeVar("T")


def splitmix64(x: int) -> int:
    z = (x + _SPLITMIX_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class Rng:
    """xorshift64* generator with a 64-bit state."""

    __slots__ = ("state",)

    def __init__(self, seed: int = 0):
        state = splitmix64(int(seed) & MASK64)
        self.state = state if state != 0 else _FALLBACK_STATE

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * MULTIPLIER) & MASK64

    def random(self) -> float:
        """Uniform double in [0, 1) built from the top 53 output bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, low: float, high: float, shape: tuple[int, ...] | int = ()) -> np.ndarray | float:
        if shape == ():
            return low + (high - low) * self.random()
        out = np.empty(shape, dtype=np.float64)
        flat = out.reshape(-1)
        span = high - low
        for i in range(flat.size):
            flat[i] = low + span * self.random()
        return out

    def randbelow(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def sample(self, n: int, k: int) -> list[int]:
        """k distinct indices from range(n), in draw order (partial Fisher-Yates)."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot draw {k} of {n} without replacement")
        pool = list(range(n))
        for i in range(k):
            j = i + self.randbelow(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def choice(self, seq: Sequence[T]) -> T:
        return seq[self.randbelow(len(seq))]

    def normal(self, shape: tuple[int, ...]) -> np.ndarray:
        """Standard normals via Box-Muller; two uniforms per output value."""
        out = np.empty(shape, dtype=np.float64)
        flat = out.reshape(-1)
        for i in range(flat.size):
            u1 = 1.0 - self.random()
            u2 = self.random()
            flat[i] = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return out
