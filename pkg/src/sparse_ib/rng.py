"""Counter-based random numbers, reproducible from ``(seed, label)``.

The i-th 64-bit output of a stream with key ``k`` is
``mix64(k + (i + 1) * GOLDEN)`` where ``mix64`` is the SplitMix64 finalizer.
Keys are derived by mixing the run seed with an FNV-1a hash of the stream
label, and :meth:`Rng.split` derives child keys the same way, so streams
never share state and the sequence is identical on every platform.
"""

from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
MIX_1 = 0xBF58476D1CE4E5B9
MIX_2 = 0x94D049BB133111EB
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * MIX_1) & MASK64
    z = ((z ^ (z >> 27)) * MIX_2) & MASK64
    return z ^ (z >> 31)


def fnv1a64(text: str) -> int:
    h = FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * FNV_PRIME) & MASK64
    return h


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX_1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX_2)
    return z ^ (z >> np.uint64(31))


class Rng:
    """Deterministic stream; one consumer per instance, use ``split`` to fan out."""

    def __init__(self, seed: int, label: str = "root", *, _key: int | None = None):
        if _key is None:
            _key = mix64((int(seed) & MASK64) ^ mix64(fnv1a64(label)))
        self.key = _key
        self.counter = 0

    def split(self, label: str) -> "Rng":
        return Rng(0, _key=mix64(self.key ^ mix64(fnv1a64(label) + GOLDEN)))

    def bits(self, size: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + size + 1, dtype=np.uint64)
        self.counter += size
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + idx * np.uint64(GOLDEN)
            return _mix64_array(z)

    def uniform(self, size=None):
        """Uniforms in the open interval (0, 1): ``(top52 + 0.5) / 2**52``.

        52 bits keep both extremes exactly representable; with 53 the
        largest value would round to 1.0.
        """
        if size is None:
            self.counter += 1
            z = mix64(self.key + self.counter * GOLDEN)
            return ((z >> 12) + 0.5) * (1.0 / (1 << 52))
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape))
        u = ((self.bits(n) >> np.uint64(12)).astype(np.float64) + 0.5) * (1.0 / (1 << 52))
        return u.reshape(shape)

    def integers(self, high: int, size=None):
        """Integers in [0, high) by scaling uniforms."""
        if size is None:
            return min(int(self.uniform() * high), high - 1)
        return np.minimum(np.floor(self.uniform(size) * high), high - 1).astype(np.int64)

    def shuffle(self, indices) -> list:
        """Return a permuted copy (Fisher-Yates driven by this stream)."""
        out = list(indices)
        n = len(out)
        if n < 2:
            return out
        u = self.uniform(n - 1)
        for i in range(n - 1, 0, -1):
            j = min(int(u[n - 1 - i] * (i + 1)), i)
            out[i], out[j] = out[j], out[i]
        return out

    def choice(self, n: int, k: int) -> list[int]:
        """k distinct indices from range(n), in selection order."""
        return self.shuffle(range(n))[:k]
