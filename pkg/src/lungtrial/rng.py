"""Seed derivation and counter-based random streams.

Every random quantity in the trial is a pure function of
``(trial_seed, key path)``, so results never depend on execution order or
worker count. Two mechanisms are used:

* :func:`derive_seed` / :func:`generator` -- hierarchical 64-bit seeds fed to
  numpy's Philox bit generator (a counter-based generator).
* :func:`poisson_counts` -- Poisson sampling where element ``i`` draws its
  uniforms from ``splitmix64(key, i, j)``. Changing the mean of one element
  never perturbs the draws of any other element.
"""

from __future__ import annotations

import hashlib
import math

import numba
import numpy as np

MASK64 = (1 << 64) - 1


def derive_seed(seed: int, *keys) -> int:
    """Mix a 64-bit seed with a key path into a new 64-bit seed.

    Keys may be ints or strings. The mapping is a hash, so sibling streams
    (``derive_seed(s, "patient", 3)`` vs ``derive_seed(s, "patient", 4)``)
    are statistically independent.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(int(seed & MASK64).to_bytes(8, "little"))
    for k in keys:
        if isinstance(k, (int, np.integer)):
            h.update(b"i" + int(k & MASK64).to_bytes(8, "little"))
        else:
            h.update(b"s" + str(k).encode() + b"\x00")
    return int.from_bytes(h.digest(), "little")


def generator(seed: int, *keys) -> np.random.Generator:
    """A Philox-backed generator for the stream ``(seed, *keys)``."""
    return np.random.Generator(np.random.Philox(key=derive_seed(seed, *keys)))


# --- counter-based uniforms and Poisson sampling (numba) -------------------

@numba.njit(cache=True, inline="always")
def _splitmix64(x):
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = x
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True, inline="always")
def _uniform(key, index, draw):
    # open interval (0, 1): 53-bit mantissa plus half an ulp
    h = _splitmix64(key ^ _splitmix64(index ^ _splitmix64(draw)))
    return ((h >> np.uint64(11)) + 0.5) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True)
def _poisson_one(lam, key, index):
    if lam <= 0.0:
        return 0.0
    draw = np.uint64(0)
    if lam < 10.0:
        # inversion by sequential search
        u = _uniform(key, index, draw)
        p = math.exp(-lam)
        cdf = p
        k = 0
        while u > cdf and k < 1000:
            k += 1
            p *= lam / k
            cdf += p
        return float(k)
    # PTRS, Hormann (1993), "The transformed rejection method for generating
    # Poisson random variables"
    slam = math.sqrt(lam)
    loglam = math.log(lam)
    b = 0.931 + 2.53 * slam
    a = -0.059 + 0.02483 * b
    invalpha = 1.1239 + 1.1328 / (b - 3.4)
    vr = 0.9277 - 3.6224 / (b - 2.0)
    while True:
        u = _uniform(key, index, draw) - 0.5
        v = _uniform(key, index, draw + np.uint64(1))
        draw += np.uint64(2)
        us = 0.5 - abs(u)
        k = math.floor((2.0 * a / us + b) * u + lam + 0.43)
        if us >= 0.07 and v <= vr:
            return k
        if k < 0.0 or (us < 0.013 and v > us):
            continue
        if (math.log(v) + math.log(invalpha) - math.log(a / (us * us) + b)) <= (
            -lam + k * loglam - math.lgamma(k + 1.0)
        ):
            return k


@numba.njit(cache=True, nogil=True)
def _poisson_flat(lam, key, out):
    for i in range(lam.size):
        out[i] = _poisson_one(lam[i], key, np.uint64(i))


def poisson_counts(mean: np.ndarray, seed: int, *keys) -> np.ndarray:
    """Poisson-distributed counts with elementwise ``mean``.

    Element ``i`` (in C order) uses only the uniforms ``u(key, i, 0..)``, so
    the draw at one element is independent of every other element's mean.
    Returns float64 counts with the shape of ``mean``.
    """
    lam = np.ascontiguousarray(mean, dtype=np.float64).ravel()
    if not np.all(np.isfinite(lam)) or np.any(lam < 0):
        raise ValueError("Poisson means must be finite and non-negative")
    out = np.empty_like(lam)
    _poisson_flat(lam, np.uint64(derive_seed(seed, *keys)), out)
    return out.reshape(np.shape(mean))
