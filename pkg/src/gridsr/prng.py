"""Portable counter-based pseudo-random generator.

All randomness in this package (synthetic fields, weight init, shuffling)
flows through one fixed 64-bit generator so that a (seed, params) pair
reproduces the same bytes on any platform with IEEE-754 doubles.

State transition (SplitMix64): the value at counter position ``i`` for a
given ``seed`` is

    z = (seed + (i + 1) * 0x9E3779B97F4A7C15)  mod 2**64
    z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9     mod 2**64
    z ^= z >> 27;  z *= 0x94D049BB133111EB     mod 2**64
    z ^= z >> 31

Uniform doubles take the top 53 bits: u = (z >> 11) * 2**-53, so u is in
[0, 1). Normal deviates come from Box-Muller on consecutive pairs
(2i, 2i+1) of the uniform stream, with u1 shifted into (0, 1]:

    r = sqrt(-2 ln u1),  out[2k] = r cos(2 pi u2),  out[2k+1] = r sin(2 pi u2)

Child streams are derived by ``derive_seed(seed, k)`` which is simply the
raw stream value at position k; distinct k give statistically independent
streams.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _mix(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * _MIX1
    z = z ^ (z >> np.uint64(27))
    z = z * _MIX2
    return z ^ (z >> np.uint64(31))


def raw(seed: int, count: int, start: int = 0) -> np.ndarray:
    """Raw uint64 stream values at counter positions start..start+count-1."""
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    return _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + idx * _GAMMA)


def uniforms(seed: int, count: int, start: int = 0) -> np.ndarray:
    """Doubles in [0, 1) from the top 53 bits of the raw stream."""
    return (raw(seed, count, start) >> np.uint64(11)).astype(np.float64) * 2.0**-53


def normals(seed: int, count: int, start: int = 0) -> np.ndarray:
    """Standard normal deviates via Box-Muller on uniform pairs."""
    pairs = (count + 1) // 2
    z = raw(seed, 2 * pairs, start)
    u1 = ((z[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53  # (0, 1]
    u2 = (z[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * pairs)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:count]


def derive_seed(seed: int, k: int) -> int:
    """Child seed for sub-stream k (k >= 0)."""
    return int(raw(seed, 1, start=k)[0])


def shuffled_indices(seed: int, n: int) -> np.ndarray:
    """Deterministic Fisher-Yates permutation of range(n)."""
    idx = np.arange(n)
    z = raw(seed, max(n - 1, 0))
    for i in range(n - 1, 0, -1):
        j = int(z[n - 1 - i] % np.uint64(i + 1))
        idx[i], idx[j] = idx[j], idx[i]
    return idx
