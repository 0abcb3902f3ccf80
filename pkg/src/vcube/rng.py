"""Counter-based random numbers.

An :class:`Rng` is addressed by ``(seed, stream, counter)``.  Draws are a pure
function of that triple, so two generators with the same address produce the
same numbers no matter what else was drawn in between.  The bit source is
numpy's Philox4x64 with ``key = (seed, stream)``; each counter value yields a
block of four 64-bit words.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_id(*parts) -> int:
    """Derive a 64-bit stream id from arbitrary hashable parts."""
    h = hashlib.blake2b(repr(parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


@dataclass
class Rng:
    seed: int
    stream: int = 0
    counter: int = 0

    def __post_init__(self):
        self.seed &= _MASK64
        self.stream &= _MASK64
        self.counter &= _MASK64

    def child(self, *parts) -> "Rng":
        """Independent generator on a sub-stream named by ``parts``."""
        return Rng(self.seed, stream_id(self.stream, *parts), 0)

    def raw(self, n: int) -> np.ndarray:
        bg = np.random.Philox(
            key=np.array([self.seed, self.stream], dtype=np.uint64),
            counter=np.array([self.counter, 0, 0, 0], dtype=np.uint64),
        )
        out = bg.random_raw(n) if n else np.empty(0, dtype=np.uint64)
        self.counter = (self.counter + (n + 3) // 4) & _MASK64
        return np.asarray(out, dtype=np.uint64)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Uniform draws on the open interval (low, high); 0 and 1 never occur."""
        shape = tuple(np.atleast_1d(shape)) if shape != () else ()
        n = int(np.prod(shape)) if shape else 1
        bits = self.raw(n) >> np.uint64(11)
        u = (bits.astype(np.float64) + 0.5) * (2.0 ** -53)
        u = u.reshape(shape) if shape else u[0]
        return low + (high - low) * u

    def normal(self, shape=()) -> np.ndarray:
        """Standard normal draws via Box-Muller on open-interval uniforms."""
        shape = tuple(np.atleast_1d(shape)) if shape != () else ()
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = np.atleast_1d(self.uniform((m,)))
        u2 = np.atleast_1d(self.uniform((m,)))
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        return z.reshape(shape) if shape else z[0]

    def integers(self, low: int, high: int, size=None):
        """Integers in [low, high] inclusive."""
        span = high - low + 1
        u = self.uniform(() if size is None else size)
        return (low + np.floor(u * span)).astype(np.int64) if size is not None else int(low + np.floor(u * span))

    def gumbel(self, shape) -> np.ndarray:
        return -np.log(-np.log(self.uniform(shape)))

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform((n,)), kind="stable")
