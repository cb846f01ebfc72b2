"""Counter-based deterministic random streams.

A stream is a splitmix64 walk: state advances by the 64-bit golden-ratio
increment and each output is the finalizer of the new state. Streams for
different purposes (token transforms, patch placement, attack steps, ...)
are derived by hashing the components (seed, purpose, image index, token
index) into independent starting states, so results never depend on
evaluation order or thread scheduling.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# Domain-separation tags for derived streams.
PURPOSE_TOKEN = 1
PURPOSE_PLACEMENT = 2
PURPOSE_ATTACK = 3
PURPOSE_MONITOR = 4
PURPOSE_INPUT = 5


def mix64(x: int) -> int:
    """splitmix64 finalizer of a 64-bit word."""
    x &= _MASK
    x = ((x ^ (x >> 30)) * _MIX1) & _MASK
    x = ((x ^ (x >> 27)) * _MIX2) & _MASK
    return x ^ (x >> 31)


def derive_key(*parts: int) -> int:
    """Hash integer components into a 64-bit stream key.

    Components are folded in order, each through one splitmix64 round, so
    (a, b) and (b, a) give unrelated keys.
    """
    h = 0
    for p in parts:
        h = mix64((h + _GOLDEN + (int(p) & _MASK)) & _MASK)
    return h


class Stream:
    """Deterministic 64-bit random stream with a counter-based core."""

    __slots__ = ("_state",)

    def __init__(self, key: int):
        self._state = int(key) & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK
        return mix64(self._state)

    def _u64_block(self, n: int) -> np.ndarray:
        """Advance the counter by n and return the n outputs as uint64."""
        with np.errstate(over="ignore"):
            idx = np.arange(1, n + 1, dtype=np.uint64)
            s = np.uint64(self._state) + np.uint64(_GOLDEN) * idx
            self._state = int(s[-1]) if n else self._state
            z = (s ^ (s >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            return z ^ (z >> np.uint64(31))

    def random(self) -> float:
        """Uniform float in [0, 1) with 53-bit resolution."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.random()

    def uniforms(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self._u64_block(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return low + (high - low) * u

    def normals(self, n: int, std: float = 1.0) -> np.ndarray:
        """n Gaussian draws via Box-Muller on consecutive uniform pairs."""
        m = (n + 1) // 2
        # u1 in (0, 1] so log never sees zero
        u1 = ((self._u64_block(m) >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (self._u64_block(m) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return std * z

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n) without modulo bias (rejection)."""
        if n <= 0:
            raise ValueError("randbelow requires n >= 1")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def shuffled(self, items: list) -> list:
        """Fisher-Yates shuffle, drawing back to front."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.randbelow(i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def rademacher(self, n: int) -> np.ndarray:
        """n draws from {-1.0, +1.0} with equal probability."""
        bits = self._u64_block(n) & np.uint64(1)
        return bits.astype(np.float64) * 2.0 - 1.0


def token_stream(seed: int, image_index: int, token_index: int) -> Stream:
    """Per-token transform stream, independent of evaluation order."""
    return Stream(derive_key(seed, PURPOSE_TOKEN, image_index, token_index))


def placement_stream(seed: int, image_index: int) -> Stream:
    """Per-image patch placement stream."""
    return Stream(derive_key(seed, PURPOSE_PLACEMENT, image_index))
