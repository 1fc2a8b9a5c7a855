"""Counter-based pseudo random numbers.

Every draw is ``splitmix64(key + counter * GOLDEN)`` where ``key`` is derived
from the seed and a tuple of stream labels.  The output depends only on
(seed, labels, counter), never on the platform generator, so two runs with
the same seed reproduce bit-for-bit.

Uniforms take the top 53 bits; normals use the cosine branch of Box-Muller
on two consecutive uniforms.
"""
import hashlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z):
    z = np.asarray(z, dtype=np.uint64)
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _label_word(label):
    if isinstance(label, (int, np.integer)):
        return int(label) & _MASK
    digest = hashlib.blake2b(str(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class CounterRNG:
    """Deterministic generator addressed by ``(seed, *labels)``.

    ``child(*labels)`` derives an independent substream; the parent's counter
    is unaffected, so substreams can be requested in any order.
    """

    def __init__(self, seed, *labels):
        self.seed = int(seed)
        self.labels = tuple(labels)
        key = _mix(np.array([self.seed & _MASK], dtype=np.uint64))[0]
        for label in self.labels:
            word = np.array([_label_word(label)], dtype=np.uint64)
            key = _mix(np.array([key], dtype=np.uint64) ^ _mix(word))[0]
        self._key = np.uint64(key)
        self.counter = 0

    def child(self, *labels):
        return CounterRNG(self.seed, *self.labels, *labels)

    def bits(self, n):
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        return _mix(self._key + idx * _GOLDEN)

    def uniform(self, size):
        """Uniform doubles in [0, 1)."""
        n = int(np.prod(size))
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(size)

    def normal(self, size):
        n = int(np.prod(size))
        u = (self.bits(2 * n) >> np.uint64(11)).astype(np.float64)
        u1 = (u[0::2] + 1.0) * 2.0**-53  # (0, 1], keeps log finite
        u2 = u[1::2] * 2.0**-53
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return z.reshape(size)

    def integers(self, high, size):
        """Integers in [0, high)."""
        u = self.uniform(size)
        return np.minimum((u * high).astype(np.int64), high - 1)

    def permutation(self, n):
        return np.argsort(self.uniform(n), kind="stable")
