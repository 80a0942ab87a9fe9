"""SplitMix64 pseudo-random generator.

Every random initialization in the package draws from this generator so that
a seed reproduces parameters bit-for-bit on any platform.  Output ``i`` of a
stream seeded with ``s`` is ``mix(s + (i + 1) * GOLDEN_GAMMA)`` (mod 2**64),
which makes the stream trivially vectorizable.

Constants (Steele, Lea & Flood, 2014):

    GOLDEN_GAMMA = 0x9E3779B97F4A7C15
    MIX_1        = 0xBF58476D1CE4E5B9
    MIX_2        = 0x94D049BB133111EB
"""

from __future__ import annotations

import numpy as np

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX_1 = 0xBF58476D1CE4E5B9
MIX_2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1


def _mix_scalar(z: int) -> int:
    z = ((z ^ (z >> 30)) * MIX_1) & _MASK
    z = ((z ^ (z >> 27)) * MIX_2) & _MASK
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    # uint64 array arithmetic wraps modulo 2**64
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX_1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX_2)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Counter-based SplitMix64 stream."""

    def __init__(self, seed: int = 0):
        self.state = int(seed) & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & _MASK
        return _mix_scalar(self.state)

    def u64(self, n: int) -> np.ndarray:
        """The next ``n`` raw outputs as a uint64 array."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GOLDEN_GAMMA)
            out = _mix_array(z)
        self.state = (self.state + n * GOLDEN_GAMMA) & _MASK
        return out

    def random(self, shape=()) -> np.ndarray:
        """Uniform floats in [0, 1) with 53 random bits each."""
        n = int(np.prod(shape, dtype=np.int64))
        bits = self.u64(n) >> np.uint64(11)
        return (bits.astype(np.float64) * 2.0**-53).reshape(shape)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return low + (high - low) * self.random(shape)

    def normal(self, shape=()) -> np.ndarray:
        """Standard normals via Box-Muller."""
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u1 = 1.0 - self.random(m)  # (0, 1], safe for log
        u2 = self.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n].reshape(shape)
