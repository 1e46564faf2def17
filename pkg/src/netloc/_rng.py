"""Keyed, counter-based random streams.

Each draw is a pure function of ``(seed, tag, a, b, k)``, so per-edge
noise does not depend on evaluation order or on how work is split across
threads.  The mixer is splitmix64's finaliser applied to a running hash.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def _hash(*keys) -> np.ndarray:
    arrays = np.broadcast_arrays(*[np.asarray(k).astype(np.uint64) for k in keys])
    h = np.zeros(arrays[0].shape, dtype=np.uint64)
    for k in arrays:
        h = _mix(h ^ k)
    return h


def uniform(seed: int, tag: int, a, b, k=0) -> np.ndarray:
    """Uniform draws in the open interval (0, 1)."""
    bits = _hash(seed, tag, a, b, k) >> np.uint64(11)
    return (bits.astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def normal(seed: int, tag: int, a, b, k=0) -> np.ndarray:
    """Standard normal draws via Box-Muller on two keyed uniforms."""
    k = np.asarray(k).astype(np.uint64)
    u1 = uniform(seed, tag, a, b, 2 * k)
    u2 = uniform(seed, tag, a, b, 2 * k + np.uint64(1))
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
