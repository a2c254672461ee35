"""Counter-based random streams (SplitMix64), bit-stable across platforms.

Draw ``i`` of a stream with key ``k`` is ``mix64(k + (i + 1) * 0x9E3779B97F4A7C15)``
where ``mix64`` is the SplitMix64 finalizer. Uniforms take the top 53 bits;
normals use Box-Muller on pairs of uniforms. Child streams hash their parent
key together with integer labels, so independent sub-streams can be derived
without consuming draws.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    # uint64 array arithmetic wraps modulo 2**64
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *labels: int) -> int:
    """Hash a seed with integer labels into a new 64-bit seed."""
    k = mix64(int(seed) & _MASK)
    for lab in labels:
        k = mix64(k ^ mix64((int(lab) & _MASK) + _GOLDEN))
    return k


class Rng:
    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self.key = mix64(self.seed)
        self.counter = 0

    def child(self, *labels: int) -> "Rng":
        return Rng(derive_seed(self.seed, *labels))

    def bits(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + idx * np.uint64(_GOLDEN)
            return _mix64_array(z)

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return low + (high - low) * u

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1]
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n]

    def integers(self, n: int, high: int) -> np.ndarray:
        """``n`` integers in ``[0, high)``."""
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``."""
        return self.permutation(n)[:k]


def randn_init(shape: tuple[int, ...], fan_in: int, seed: int) -> np.ndarray:
    """He-style normal init, variance ``2 / fan_in``."""
    n = int(np.prod(shape)) if shape else 1
    return (Rng(seed).normal(n) * np.sqrt(2.0 / fan_in)).reshape(shape)
