"""Counter-based hashing used for order-independent random fields."""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def hash_keys(seed: int, *keys) -> np.ndarray:
    """Hash ``seed`` together with integer key arrays into uint64 words."""
    arrays = np.broadcast_arrays(*[np.asarray(k, dtype=np.int64) for k in keys])
    with np.errstate(over="ignore"):
        h = _mix(np.full(arrays[0].shape, np.uint64(seed % 2**64)) + _GOLDEN)
        for a in arrays:
            h = _mix(h ^ (a.view(np.uint64) + _GOLDEN))
    return h


def uniforms(seed: int, *keys) -> np.ndarray:
    """Uniform variates in the open interval (0, 1), one per key tuple."""
    h = hash_keys(seed, *keys)
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
