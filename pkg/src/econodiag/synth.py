"""Seeded synthetic signals with known ground truth.

Gaussian variates come from a fixed algorithm rather than numpy's default
generator, whose streams are not guaranteed stable across releases:

1. SplitMix64 in counter mode: the i-th 64-bit word is
   ``mix64(seed + (i + 1) * 0x9E3779B97F4A7C15)`` (mod 2**64), where
   ``mix64`` is the SplitMix64 finalizer (shifts 30/27/31, multipliers
   ``0xBF58476D1CE4E5B9`` and ``0x94D049BB133111EB``).
2. Uniform doubles ``u = (word >> 11) * 2**-53`` in [0, 1).
3. Box-Muller on consecutive pairs ``(u1, u2)``:
   ``r = sqrt(-2 ln(1 - u1))``, normals ``r cos(2 pi u2)`` then
   ``r sin(2 pi u2)``.  Using ``1 - u1`` keeps the log argument in (0, 1].

Everything is IEEE-754 double arithmetic; integer steps are exact.
"""

from __future__ import annotations

import numpy as np

from .series import SeriesError, TimeSeries

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _check_seed(seed) -> np.uint64:
    seed = int(seed)
    if not 0 <= seed <= _MASK64:
        raise SeriesError("seed must be an unsigned 64-bit integer")
    return np.uint64(seed)


def splitmix64(seed, n: int) -> np.ndarray:
    """First ``n`` outputs of SplitMix64 started from ``seed``."""
    s = _check_seed(seed)
    with np.errstate(over="ignore"):
        z = s + (np.arange(1, n + 1, dtype=np.uint64) * _GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        z = z ^ (z >> np.uint64(31))
    return z


def uniforms(seed, n: int) -> np.ndarray:
    words = splitmix64(seed, n)
    return (words >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def standard_normals(seed, n: int) -> np.ndarray:
    """``n`` N(0, 1) draws via Box-Muller on the SplitMix64 uniform stream."""
    if n < 0:
        raise SeriesError("n must be non-negative")
    pairs = (n + 1) // 2
    u = uniforms(seed, 2 * pairs)
    u1, u2 = u[0::2], u[1::2]
    r = np.sqrt(-2.0 * np.log(1.0 - u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * pairs)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:n]


def _times(n):
    return np.arange(1, n + 1, dtype=np.int64)


def gen_white(n: int, seed, sigma: float = 1.0, label: str = "white") -> TimeSeries:
    """i.i.d. N(0, sigma**2) returns at times 1..n."""
    if n < 2:
        raise SeriesError("n must be at least 2")
    if not sigma > 0:
        raise SeriesError("sigma must be positive")
    return TimeSeries(label, _times(n), sigma * standard_normals(seed, n), kind="return")


def gen_brownian(n: int, seed, sigma: float = 1.0, label: str = "brownian") -> TimeSeries:
    """Cumulative sum of :func:`gen_white`; the first value is the first draw."""
    w = gen_white(n, seed, sigma)
    return TimeSeries(label, _times(n), np.cumsum(w.values), kind="level")


def gen_lppl(params, n: int, noise_sigma: float = 0.0, seed=0, label: str = "lppl") -> TimeSeries:
    """Log-periodic model sampled at t = 1..n plus optional Gaussian noise.

    ``params`` is an :class:`econodiag.lppl.LpplParams`; ``t_c`` must exceed n.
    With ``noise_sigma == 0`` the output does not depend on ``seed``.
    """
    from .lppl import eval_model

    if n < 2:
        raise SeriesError("n must be at least 2")
    if noise_sigma < 0:
        raise SeriesError("noise_sigma must be non-negative")
    if not params.t_c > n:
        raise SeriesError(f"t_c={params.t_c} must exceed the last sample time {n}")
    params.validate()
    t = _times(n).astype(float)
    y = eval_model(params, t)
    if noise_sigma > 0:
        y = y + noise_sigma * standard_normals(seed, n)
    return TimeSeries(label, _times(n), y, kind="level")
