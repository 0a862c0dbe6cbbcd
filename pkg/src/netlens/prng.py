"""SplitMix64 streams.

Every stochastic quantity in the toolkit (fixture weights, noise, random
heatmaps) comes from here so runs are reproducible across machines and
languages. The generator is counter based: the i-th output of a stream seeded
with ``s`` is ``mix(s + (i + 1) * GAMMA)``, which lets whole blocks be drawn
with vectorised uint64 arithmetic.

Mappings:

* uniform: ``(z >> 11) * 2**-53``, in [0, 1)
* normal: Box-Muller on consecutive uniform pairs ``(u1, u2)``,
  ``sqrt(-2 ln(1 - u1)) * (cos, sin)(2 pi u2)``, interleaved
"""

from __future__ import annotations

import hashlib

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def mix64(x: int) -> int:
    """Scalar SplitMix64 finaliser."""
    return int(_mix(np.array([x & _MASK], dtype=np.uint64))[0])


def derive_seed(seed: int, *keys: int | str) -> int:
    """Fold ``keys`` into ``seed`` to get an independent stream seed.

    Strings are hashed with BLAKE2b (8-byte digest, little endian) so the
    derivation does not depend on Python's randomised ``hash``.
    """
    h = seed & _MASK
    for key in keys:
        if isinstance(key, str):
            k = int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "little")
        else:
            k = int(key) & _MASK
        h = mix64((h + GAMMA) & _MASK ^ mix64(k))
    return h


class SplitMix64:
    """Sequential SplitMix64 stream."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            state = np.uint64(self.seed) + idx * np.uint64(GAMMA)
        return _mix(state)

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        if low == 0.0 and high == 1.0:
            return u
        return low + (high - low) * u

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        return z.ravel()[:n]
