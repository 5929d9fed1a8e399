"""Counter-based randomness.

Every stochastic choice in the pipeline (depth jitter, importance draws,
background radiance, pixel subsets, noise images) is derived from explicit
integer seeds instead of shared RNG state.  This makes results independent
of evaluation order and thread count: rendering one pixel of an image
consumes exactly the same random values as rendering that pixel as part of
the full image.
"""

from __future__ import annotations

import hashlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64


def mix64(x) -> np.ndarray:
    """SplitMix64 finalizer, vectorized over uint64 arrays."""
    x = np.asarray(x, dtype=np.uint64)
    x = (x ^ (x >> _U64(30))) * _MIX1
    x = (x ^ (x >> _U64(27))) * _MIX2
    return x ^ (x >> _U64(31))


def _fold(part) -> np.uint64:
    if isinstance(part, str):
        digest = hashlib.blake2b(part.encode("utf-8"), digest_size=8).digest()
        return _U64(int.from_bytes(digest, "little"))
    if isinstance(part, (bool, np.bool_)):
        return _U64(int(part))
    if isinstance(part, (int, np.integer)):
        return _U64(int(part) & 0xFFFFFFFFFFFFFFFF)
    raise TypeError(f"cannot fold {type(part).__name__} into a seed")


def derive_seed(*parts) -> int:
    """Hash an arbitrary mix of ints and strings into a 64-bit seed."""
    state = _U64(0x6A09E667F3BCC908)
    for part in parts:
        state = mix64((state + _GOLDEN) ^ _fold(part))[()]
    return int(state)


def combine(base: int, *arrays) -> np.ndarray:
    """Vectorized seed derivation: chain integer arrays into a base seed.

    Equivalent to derive_seed(base-parts..., a[i], b[i], ...) per element,
    broadcasting the inputs together.
    """
    arrays = np.broadcast_arrays(*[np.asarray(a) for a in arrays])
    state = np.full(arrays[0].shape, np.uint64(base), dtype=np.uint64)
    for arr in arrays:
        state = mix64((state + _GOLDEN) ^ arr.astype(np.uint64))
    return state


def uniforms(seeds, count: int) -> np.ndarray:
    """Per-seed uniform streams.

    Args:
        seeds: (R,) array-like of uint64 stream seeds.
        count: number of values per stream.

    Returns:
        (R, count) float64 in [0, 1), deterministic per (seed, index).
    """
    seeds = np.asarray(seeds, dtype=np.uint64).reshape(-1, 1)
    ctr = (np.arange(1, count + 1, dtype=np.uint64) * _GOLDEN).reshape(1, -1)
    bits = mix64(seeds + ctr)
    return (bits >> _U64(11)).astype(np.float64) * (2.0**-53)


def generator(*parts) -> np.random.Generator:
    """Fresh numpy Generator keyed by the given seed parts."""
    return np.random.default_rng(derive_seed(*parts))
