"""Deterministic random streams built on SplitMix64.

Every random decision in the library draws from a SplitMix64 stream whose
seed is ``fnv1a64(component_name) XOR master_seed``.  SplitMix64 states form
an arithmetic sequence, so bulk output is generated with vectorized uint64
arithmetic; results are bit-identical across platforms and trivially
portable to other languages.
"""

from __future__ import annotations

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(name: str) -> int:
    """64-bit FNV-1a hash of a UTF-8 string."""
    h = _FNV_OFFSET
    for byte in name.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def derive_seed(master_seed: int, component: str) -> int:
    """Seed for a named component stream: fnv1a64(component) XOR master."""
    return fnv1a64(component) ^ (master_seed & 0xFFFFFFFFFFFFFFFF)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Counter-based SplitMix64 generator.

    The i-th raw output is mix(seed + (i+1)*GAMMA), identical to repeatedly
    advancing the reference implementation's state.
    """

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._count = 0

    def u64(self, n: int) -> np.ndarray:
        """Next n raw 64-bit outputs as a uint64 array."""
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        with np.errstate(over="ignore"):
            return _mix(self._seed + idx * _GAMMA)

    def next_u64(self) -> int:
        return int(self.u64(1)[0])

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1), 53-bit resolution."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def randint(self, bound: int, n: int) -> np.ndarray:
        """n integers uniform in [0, bound). Bias is O(bound / 2^53)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return np.floor(self.uniform(n) * bound).astype(np.int64)

    def randint_scalar(self, bound: int) -> int:
        return int(self.randint(bound, 1)[0])

    def permutation(self, n: int) -> np.ndarray:
        """Uniform permutation of range(n) via sorting random keys."""
        keys = self.u64(n)
        return np.argsort(keys, kind="stable")

    def sample(self, n: int, k: int) -> np.ndarray:
        """k indices sampled without replacement from range(n)."""
        if k > n:
            raise ValueError(f"cannot sample {k} from {n}")
        return self.permutation(n)[:k]

    def normal(self, n: int) -> np.ndarray:
        """n standard Gaussians (Box-Muller)."""
        pairs = (n + 1) // 2
        # u1 in (0, 1] keeps log finite
        u1 = (self.u64(pairs) >> np.uint64(11)).astype(np.float64)
        u1 = (u1 + 1.0) * 2.0**-53
        u2 = self.uniform(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]


def substream(master_seed: int, component: str) -> SplitMix64:
    """Independent stream for a named component."""
    return SplitMix64(derive_seed(master_seed, component))
