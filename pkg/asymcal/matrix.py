"""Dense matrix helpers, seeded RNG and synthetic calibration activations.

Matrices are plain 2-D ``numpy.ndarray`` objects (float32 or float64). The
random streams are ``numpy.random.PCG64`` generators derived from a 64-bit
seed through ``SeedSequence``, so a given seed yields the same matrices on
every run and platform.
"""

import logging
from dataclasses import dataclass
from typing import Union

import numpy as np

from .exceptions import ShapeError

logger = logging.getLogger(__name__)

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

Matrix = np.ndarray


@dataclass(frozen=True)
class Seed:
    """64-bit unsigned seed for every generated matrix."""

    value: int

    def __post_init__(self):
        if not 0 <= int(self.value) < 2 ** 64:
            raise ValueError(f"Seed must fit in 64 unsigned bits, got {self.value}")


def make_rng(seed: Union[Seed, int], *stream: int) -> np.random.Generator:
    """
    Build a deterministic generator for a seed and optional sub-stream ids.

    Args:
        seed: Root seed
        *stream: Extra integers selecting an independent sub-stream

    Returns:
        PCG64-backed numpy Generator
    """
    value = seed.value if isinstance(seed, Seed) else int(seed)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([value, *stream])))


def as_matrix(values, dtype=np.float64) -> Matrix:
    """
    Validate and convert values into a finite 2-D matrix.

    Args:
        values: Array-like input
        dtype: Target dtype (float32 or float64)

    Returns:
        2-D ndarray of the requested dtype
    """
    if np.dtype(dtype) not in SUPPORTED_DTYPES:
        raise ValueError(f"Unsupported dtype: {dtype}")
    arr = np.asarray(values, dtype=dtype)
    if arr.ndim != 2:
        raise ShapeError(f"Expected a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("Matrix contains NaN or Inf values")
    return arr


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """
    Standard matrix product with shape and dtype checks.

    Args:
        a: Left operand (r x s)
        b: Right operand (s x t)

    Returns:
        Product matrix (r x t)
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"Cannot multiply {a.shape} by {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"Operand dtypes differ: {a.dtype} vs {b.dtype}")
    return a @ b


def correlation_factor(n: int, decay: float) -> Matrix:
    """Lower-triangular mixing matrix with entries decay**(i - j) for j <= i."""
    idx = np.arange(n)
    power = idx[:, None] - idx[None, :]
    return np.tril(np.power(float(decay), np.maximum(power, 0)))


def gen_correlated(seed: Union[Seed, int], n: int, k: int, decay: float) -> Matrix:
    """
    Generate channel-correlated activations X = A @ Z.

    Z is an n x k standard normal sample drawn from ``seed`` and A is the
    lower-triangular factor of :func:`correlation_factor`.

    Args:
        seed: Root seed
        n: Number of channels (rows)
        k: Number of tokens (columns)
        decay: Correlation decay in (0, 1]

    Returns:
        n x k float64 matrix
    """
    if n < 1 or k < 1:
        raise ValueError(f"n and k must be positive, got n={n}, k={k}")
    if not 0.0 < decay <= 1.0:
        raise ValueError(f"decay must lie in (0, 1], got {decay}")
    z = make_rng(seed).standard_normal((n, k))
    return correlation_factor(n, decay) @ z
