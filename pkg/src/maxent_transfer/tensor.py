"""Dense float64 tensors and seeded sampling.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. Randomness comes from numpy's PCG64 bit generator, which produces the
same stream for a given seed on every platform numpy supports.
"""

from typing import NamedTuple

import numpy as np

from .errors import DimensionError, NumericError

DTYPE = np.float64


def as_tensor(data, *, name="tensor"):
    """Return ``data`` as a C-contiguous float64 array, rejecting NaN/Inf."""
    t = np.ascontiguousarray(data, dtype=DTYPE)
    if not np.all(np.isfinite(t)):
        raise NumericError(f"{name} contains non-finite values")
    return t


def make_rng(seed):
    """PCG64 generator seeded with a non-negative integer (or a SeedSequence)."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def derive_rng(seed, *stream):
    """Independent generator for a named sub-stream of ``seed``.

    ``stream`` is a tuple of non-negative ints; the same (seed, stream) pair
    always yields the same generator, and different streams do not overlap.
    """
    return make_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))


def matmul(a, b):
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def normal_sample(rng, shape, mean=0.0, variance=1.0):
    """i.i.d. normal draws; ``variance == 0`` gives the constant ``mean``."""
    if variance < 0:
        raise ValueError(f"variance must be >= 0, got {variance}")
    if variance == 0:
        return np.full(shape, float(mean), dtype=DTYPE)
    return rng.normal(loc=mean, scale=np.sqrt(variance), size=shape).astype(DTYPE, copy=False)


class Stats(NamedTuple):
    mean: float
    variance: float
    energy: float


def reduce_stats(t):
    """Population mean, variance and energy (mean of squares) over all elements."""
    t = np.asarray(t, dtype=DTYPE)
    if t.size == 0:
        raise ValueError("reduce_stats needs a non-empty tensor")
    mean = float(t.mean())
    energy = float(np.mean(t * t))
    variance = float(np.mean((t - mean) ** 2))
    return Stats(mean, variance, energy)
