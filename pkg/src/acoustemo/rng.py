"""splitmix64-seeded xoshiro256** generators.

The algorithm is fixed (rather than delegated to numpy's bit generators) so
the synthetic corpus can be regenerated bit-for-bit from a seed in any
language.  ``XoshiroLanes`` runs many independent streams in lock-step over
numpy uint64 arrays; lane ``k`` produces exactly the sequence a scalar
:class:`Xoshiro256StarStar` seeded with the same state would.

Conversions:
  uniform  = (next >> 11) * 2**-53            in [0, 1)
  normal   = sqrt(-2 ln(1 - u1)) * cos(2 pi u2)   (two uniforms, cosine branch only)
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_TWO_NEG53 = 2.0 ** -53


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + _GOLDEN) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * _M1) & MASK64
        z = ((z ^ (z >> 27)) * _M2) & MASK64
        return z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256StarStar:
    def __init__(self, seed: int | None = None, state: tuple[int, int, int, int] | None = None):
        if state is None:
            sm = SplitMix64(seed or 0)
            state = tuple(sm.next() for _ in range(4))
        if not any(state):
            raise ValueError("xoshiro state must not be all zero")
        self.s = list(state)

    def next(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def uniform(self) -> float:
        return (self.next() >> 11) * _TWO_NEG53

    def uniform_range(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform()

    def integer(self, lo: int, hi: int) -> int:
        """Integer in ``[lo, hi]`` inclusive (floor of a scaled uniform)."""
        return lo + min(int(self.uniform() * (hi - lo + 1)), hi - lo)

    def normal(self) -> float:
        u = np.array([[self.uniform()], [self.uniform()]])
        return float(_box_muller(u[0], u[1])[0])


def _rotl_vec(x: np.ndarray, k: int) -> np.ndarray:
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


class XoshiroLanes:
    """``n`` xoshiro256** streams advanced together."""

    def __init__(self, states: np.ndarray):
        st = np.asarray(states, dtype=np.uint64)
        if st.ndim != 2 or st.shape[1] != 4:
            raise ValueError("states must be n x 4")
        self.s = [st[:, i].copy() for i in range(4)]

    @classmethod
    def from_splitmix(cls, seed: int, n_lanes: int) -> "XoshiroLanes":
        """Lane ``k`` takes outputs ``4k..4k+3`` of one SplitMix64(seed) stream."""
        sm = SplitMix64(seed)
        return cls(np.array([[sm.next() for _ in range(4)] for _ in range(n_lanes)], dtype=np.uint64))

    def next(self) -> np.ndarray:
        s0, s1, s2, s3 = self.s
        with np.errstate(over="ignore"):
            result = _rotl_vec(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        self.s[3] = _rotl_vec(s3, 45)
        return result

    def uniform(self) -> np.ndarray:
        return (self.next() >> np.uint64(11)).astype(np.float64) * _TWO_NEG53

    def normal(self) -> np.ndarray:
        u1 = self.uniform()
        u2 = self.uniform()
        return _box_muller(u1, u2)


def _box_muller(u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    # shared by scalar and lane paths so both round identically
    return np.sqrt(-2.0 * np.log(1.0 - u1)) * np.cos(2.0 * np.pi * u2)
