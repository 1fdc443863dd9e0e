"""Counter-based random numbers.

Every draw is a pure function of ``(seed, stream, path, counter)`` so that path
``i`` of a Monte Carlo run sees the same numbers no matter how paths are batched
or scheduled.  The mixing function is the SplitMix64 finalizer.
"""
from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

# stream identifiers
BROWNIAN = 1
BRIDGE = 2
POISSON_COUNT = 3
POISSON_TIME = 4
POISSON_MARK = 5
THINNING = 6
MISC = 7


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _key(seed: int, stream: int, path) -> np.ndarray:
    path = np.asarray(path, dtype=np.uint64)
    with np.errstate(over="ignore"):
        k = _mix(np.asarray([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64) + _GOLDEN)
        k = _mix(k ^ np.asarray([stream], dtype=np.uint64) * _GOLDEN)
        return _mix(k ^ (path + np.uint64(1)) * _M1)


def uniforms(seed: int, stream: int, path, counter) -> np.ndarray:
    """Uniform variates in the open interval (0, 1).

    ``path`` and ``counter`` broadcast against each other.
    """
    key = _key(seed, stream, path)
    ctr = np.asarray(counter, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = _mix(key + (ctr + np.uint64(1)) * _GOLDEN)
    return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53 + 2.0**-54


def normals(seed: int, stream: int, path, counter) -> np.ndarray:
    """Standard normal variates by inversion of :func:`uniforms`."""
    return ndtri(uniforms(seed, stream, path, counter))
