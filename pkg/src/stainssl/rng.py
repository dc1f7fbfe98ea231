"""Counter-based splitmix64 streams.

Every random draw in the package comes from a :class:`SplitMix` stream. The
generator is counter-based (output ``i`` depends only on the initial state
and ``i``), so blocks of outputs are produced in vectorized numpy without a
Python loop and streams are reproducible on any platform.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

_U64 = np.uint64
_GAMMA = _U64(GOLDEN_GAMMA)
_M1 = _U64(0xBF58476D1CE4E5B9)
_M2 = _U64(0x94D049BB133111EB)


def mix64(z: int) -> int:
    """splitmix64 finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _U64(30))) * _M1
        z = (z ^ (z >> _U64(27))) * _M2
    return z ^ (z >> _U64(31))


def tag_of(*parts) -> int:
    """Fold a tuple of ints/strings into one 64-bit stream tag."""
    h = 0x243F6A8885A308D3
    for p in parts:
        if isinstance(p, str):
            for b in p.encode("utf-8"):
                h = mix64(h ^ b)
            h = mix64(h ^ 0xFF)
        else:
            h = mix64(h ^ (int(p) & MASK64))
    return h


class SplitMix:
    """A splitmix64 stream seeded with ``seed XOR mix64(tag)``.

    ``SplitMix(0)`` reproduces the reference sequence starting with
    ``0xE220A8397B1DCDAF``.
    """

    __slots__ = ("state0", "counter")

    def __init__(self, seed: int, tag: int = 0):
        self.state0 = (int(seed) ^ mix64(int(tag))) & MASK64
        self.counter = 0

    def child(self, *parts) -> "SplitMix":
        """Independent stream derived from this stream's seed and a tag."""
        return SplitMix(self.state0, tag_of(*parts))

    def next_u64(self) -> int:
        self.counter += 1
        return mix64(self.state0 + self.counter * GOLDEN_GAMMA)

    def u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=_U64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = _U64(self.state0) + idx * _GAMMA
        return _mix_array(z)

    def random(self, n: int | None = None):
        """Uniform floats in [0, 1) with 53 bits of resolution."""
        if n is None:
            return (self.next_u64() >> 11) * (1.0 / (1 << 53))
        return (self.u64(n) >> _U64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float, n: int | None = None):
        if n is None:
            return lo + (hi - lo) * self.random()
        return lo + (hi - lo) * self.random(n)

    def integers(self, hi: int, n: int | None = None):
        """Integers in [0, hi) (float-scaled; bias is below 2**-40 for our ranges)."""
        if n is None:
            return min(int(self.random() * hi), hi - 1)
        return np.minimum((self.random(n) * hi).astype(np.int64), hi - 1)

    def normal(self, n: int) -> np.ndarray:
        """Standard normals by Box-Muller."""
        m = (n + 1) // 2
        u1 = 1.0 - self.random(m)  # (0, 1]
        u2 = self.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n]

    def truncated_normal(self, n: int, std: float, bound: float = 2.0) -> np.ndarray:
        """Normals with std ``std`` resampled until inside ``bound`` std."""
        out = self.normal(n)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self.normal(int(bad.sum()))
            bad = np.abs(out) > bound
        return out * std

    def poisson(self, lam: float) -> int:
        if lam <= 0:
            return 0
        if lam > 50:
            return max(0, int(round(lam + math.sqrt(lam) * self.normal(1)[0])))
        # Knuth multiplication method
        limit = math.exp(-lam)
        k, p = 0, self.random()
        while p > limit:
            k += 1
            p *= self.random()
        return k

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        if n < 2:
            return perm
        draws = self.random(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(draws[n - 1 - i] * (i + 1))
            if j > i:
                j = i
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, sorted ascending."""
        if k >= n:
            return np.arange(n)
        return np.sort(self.permutation(n)[:k])


def splitmix_stream(seed: int, tag: int = 0) -> SplitMix:
    return SplitMix(seed, tag)
