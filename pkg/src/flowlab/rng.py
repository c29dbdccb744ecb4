"""Counter-based Gaussian increments.

Every draw is a pure function of ``(seed, path, step, component)``: the
stream for one path is the SplitMix64 sequence started from a path-specific
state, evaluated at counter ``step * m + component``. Nothing is carried
between calls, so any subset of paths or steps can be regenerated in any
order (replay, path chunking across threads) and always gives the same bits.
"""

import numpy as np
from scipy.special import ndtri

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_PATH_SALT = np.uint64(0xD1B54A32D192ED03)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_TWO_M53 = 2.0 ** -53


def mix64(z):
    """SplitMix64 finalizer applied elementwise to a uint64 array."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _S30)) * _M1
        z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def path_keys(seed, paths):
    """Per-path stream state for ``seed`` and an array of path indices."""
    seed_key = mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    paths = np.asarray(paths, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return mix64(seed_key ^ mix64(paths * _PATH_SALT + _GAMMA))


def raw(keys, counters):
    """Raw 64-bit outputs at the given counters (broadcast against ``keys``)."""
    counters = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return mix64(keys + (counters + np.uint64(1)) * _GAMMA)


def uniforms(keys, counters):
    """Doubles in the open interval (0, 1) with 53 random bits."""
    r = raw(keys, counters)
    return ((r >> _S11).astype(np.float64) + 0.5) * _TWO_M53


def normal_increments(keys, step, m, dt):
    """Brownian increments of variance ``dt`` for one time step.

    Returns an array of shape ``keys.shape + (m,)``.
    """
    counters = np.uint64(step) * np.uint64(m) + np.arange(m, dtype=np.uint64)
    u = uniforms(keys[..., None], counters)
    return np.sqrt(dt) * ndtri(u)
