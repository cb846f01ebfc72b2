"""Seed-derived reference input, shared with the inference runtime.

The manifest records only an integer input seed; both sides regenerate
the same image from it: pixels uniform in [0, 1] drawn from a splitmix64
walk keyed by folding (input_seed, 5) through the finalizer, filled in
C-order over (channel, row, col).
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_PURPOSE_INPUT = 5


def _mix64(x: int) -> int:
    x &= _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def _derive_key(*parts: int) -> int:
    h = 0
    for p in parts:
        h = _mix64((h + _GOLDEN + (int(p) & _MASK)) & _MASK)
    return h


def reference_input(image_size: int, input_seed: int, channels: int = 3) -> np.ndarray:
    state = _derive_key(int(input_seed), _PURPOSE_INPUT)
    n = channels * image_size * image_size
    with np.errstate(over="ignore"):
        idx = np.arange(1, n + 1, dtype=np.uint64)
        s = np.uint64(state) + np.uint64(_GOLDEN) * idx
        z = (s ^ (s >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    u = (z >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return u.astype(np.float32).reshape(channels, image_size, image_size)
