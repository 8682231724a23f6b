"""Portable counter-based pseudo-random streams.

Every stream is SplitMix64 evaluated in counter mode: the i-th 64-bit output
of a stream with seed ``s`` is ``mix(s + i * 0x9E3779B97F4A7C15)`` (i starting
at 1, arithmetic mod 2**64), where ``mix`` is the SplitMix64 finalizer::

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

Doubles take the top 53 bits: ``(u >> 11) * 2**-53``. Gaussians use the
Box-Muller transform on consecutive uniform pairs ``(a, b)`` with
``r = sqrt(-2 ln(1 - a))`` giving ``r cos(2 pi b), r sin(2 pi b)`` in that
order. Child streams are keyed by ``mix(seed ^ mix(key + GAMMA))``. A port
that follows these rules reproduces every stream exactly.
"""

from __future__ import annotations

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
_C1 = np.uint64(0xBF58476D1CE4E5B9)
_C2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _C1
    z = (z ^ (z >> np.uint64(27))) * _C2
    return z ^ (z >> np.uint64(31))


def mix64(value: int) -> int:
    """SplitMix64 finalizer on a single Python int."""
    return int(_mix(np.array([value & _MASK], dtype=np.uint64))[0])


class Stream:
    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self.counter = 0

    def __repr__(self):
        return f"Stream(seed={self.seed:#x}, counter={self.counter})"

    def child(self, *keys: int) -> "Stream":
        """Independent stream derived from this seed and integer keys.

        Does not advance this stream.
        """
        s = self.seed
        for key in keys:
            s = mix64(s ^ mix64((int(key) + GAMMA) & _MASK))
        return Stream(s)

    def u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix(np.uint64(self.seed) + idx * np.uint64(GAMMA))

    def uniform(self, size) -> np.ndarray:
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape)

    def normal(self, size) -> np.ndarray:
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)
        return z[:n].reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        keys = self.u64(n)
        return np.argsort(keys, kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), in random order."""
        return self.permutation(n)[:k]

    def unit_vectors(self, count: int, dim: int) -> np.ndarray:
        v = self.normal((count, dim))
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        # a zero Gaussian draw has probability zero; guard anyway
        norms[norms == 0.0] = 1.0
        return v / norms
