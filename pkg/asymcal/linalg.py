"""Structured linear algebra for layer-wise calibration.

Covers the dampened Hessian, the inverse-Cholesky factor, Gaussian-elimination
slicing of the inverse Hessian, the sliced-factor identity and both the
row-loop and fused masked-GEMM computations of the correction matrix P.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve
from scipy.linalg.lapack import dpotrf

from .exceptions import (
    DegenerateInputError,
    EliminationError,
    FactorizationError,
    ShapeError,
)

logger = logging.getLogger(__name__)

# Below this size the fused GEMM is not worth splitting across threads.
PARALLEL_MIN_ROWS = 256


@dataclass
class HessianState:
    """Dampened Gram matrix of the layer inputs."""

    H: np.ndarray
    damp_lambda: float
    n: int
    dead_channels: np.ndarray

    @property
    def diag(self) -> np.ndarray:
        return np.diag(self.H)


@dataclass
class CholFactor:
    """Lower-triangular factor L with L @ L.T equal to the dampened inverse Hessian."""

    L: np.ndarray
    n: int
    hinv: Optional[np.ndarray] = None


@dataclass
class AsymState:
    """Input-residual statistics for asymmetric calibration."""

    DX_XT: np.ndarray
    P: np.ndarray


def build_hessian(x: np.ndarray, damp_ratio: float) -> HessianState:
    """
    Build H = X @ X.T + lambda * I.

    lambda is ``damp_ratio`` times the mean of diag(X @ X.T). Channels whose
    diagonal is zero before dampening are reported as dead.

    Args:
        x: Layer input, n x k
        damp_ratio: Dampening ratio (0.01 language setup, 0.10 vision setup)

    Returns:
        HessianState
    """
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ShapeError(f"Hessian input must be a non-empty n x k matrix, got {x.shape}")
    if damp_ratio < 0:
        raise ValueError(f"damp_ratio must be non-negative, got {damp_ratio}")

    x = np.asarray(x, dtype=np.float64)
    gram = x @ x.T
    gram = 0.5 * (gram + gram.T)
    diag = np.diag(gram)
    mean_diag = float(np.mean(diag))
    if mean_diag == 0.0:
        raise DegenerateInputError("All-zero layer input: Hessian diagonal mean is 0")

    dead = np.flatnonzero(diag == 0.0)
    if dead.size:
        logger.warning(f"{dead.size} dead input channel(s) with zero Hessian diagonal")

    damp = damp_ratio * mean_diag
    h = gram + damp * np.eye(x.shape[0])
    return HessianState(H=h, damp_lambda=damp, n=x.shape[0], dead_channels=dead)


def _cholesky_lower(a: np.ndarray, what: str) -> np.ndarray:
    c, info = dpotrf(a, lower=1, clean=1)
    if info > 0:
        pivot = info - 1
        raise FactorizationError(f"{what} is not positive definite (pivot {pivot})", pivot=pivot)
    if info < 0:
        raise FactorizationError(f"LAPACK potrf rejected argument {-info}", pivot=-1)
    return c


def inverse_cholesky(h: HessianState) -> CholFactor:
    """
    Compute the lower Cholesky factor of H^-1.

    H is factorized, inverted through two triangular solves and the inverse is
    factorized again.

    Args:
        h: Dampened Hessian

    Returns:
        CholFactor with L @ L.T == H^-1
    """
    n = h.n
    c = _cholesky_lower(h.H, "Hessian")
    hinv = cho_solve((c, True), np.eye(n))
    hinv = 0.5 * (hinv + hinv.T)
    L = _cholesky_lower(hinv, "Inverse Hessian")
    return CholFactor(L=L, n=n, hinv=hinv)


def ge_eliminate(hinv: np.ndarray, q: int) -> np.ndarray:
    """
    Eliminate index q from an inverse Hessian.

    Args:
        hinv: Symmetric inverse Hessian
        q: Index to eliminate

    Returns:
        hinv - hinv[:, q] hinv[q, :] / hinv[q, q] with row and column q zeroed
    """
    pivot = hinv[q, q]
    if pivot == 0:
        raise EliminationError(f"Zero pivot at index {q}")
    out = hinv - np.outer(hinv[:, q], hinv[q, :]) / pivot
    out[q, :] = 0.0
    out[:, q] = 0.0
    return out


def chol_slice_hinv(l: CholFactor, q: int) -> np.ndarray:
    """
    Inverse Hessian with indices 0..q-1 eliminated, restricted to [q:, q:].

    Args:
        l: Cholesky factor of the full inverse Hessian
        q: First retained index

    Returns:
        (n - q) x (n - q) matrix L[q:, q:] @ L[q:, q:].T
    """
    if not 0 <= q < l.n:
        raise IndexError(f"Slice index {q} out of range for n={l.n}")
    tail = l.L[q:, q:]
    return tail @ tail.T


def _check_square(name: str, m: np.ndarray, n: int) -> None:
    if m.shape != (n, n):
        raise ShapeError(f"{name} must be {n}x{n}, got {m.shape}")


def compute_p_reference(dx: np.ndarray, x: np.ndarray, l: CholFactor) -> np.ndarray:
    """
    Row-by-row evaluation of P[q, q+1:] = dX[q, :] X[q+1:, :].T H_q^-1.

    H_q^-1 is the inverse Hessian with indices 0..q eliminated, taken from
    :func:`chol_slice_hinv`. This is the slow reference for
    :func:`compute_p_fused`.

    Args:
        dx: Input residual X_tilde - X, n x k
        x: Quantized-path input, n x k
        l: Cholesky factor of the inverse Hessian

    Returns:
        n x n strictly upper-triangular P
    """
    if dx.shape != x.shape:
        raise ShapeError(f"dX {dx.shape} and X {x.shape} must match")
    n = x.shape[0]
    if l.n != n:
        raise ShapeError(f"Factor has n={l.n}, inputs have n={n}")

    p = np.zeros((n, n))
    for q in range(n - 1):
        row = dx[q] @ x[q + 1:].T
        p[q, q + 1:] = row @ chol_slice_hinv(l, q + 1)
    return p


def compute_p_fused(
    dx_xt: np.ndarray, l: CholFactor, threads: Optional[int] = None
) -> np.ndarray:
    """
    Masked-GEMM evaluation P = ((dX X.T L) * M_U) L.T.

    M_U keeps entries strictly above the diagonal.

    Args:
        dx_xt: Precomputed dX @ X.T, n x n
        l: Cholesky factor of the inverse Hessian
        threads: Row-block partitions evaluated concurrently (None or 1: single GEMM)

    Returns:
        n x n strictly upper-triangular P
    """
    n = l.n
    _check_square("dX @ X.T", dx_xt, n)

    masked = np.triu(dx_xt @ l.L, k=1)
    if threads is None or threads <= 1 or n < PARALLEL_MIN_ROWS:
        p = masked @ l.L.T
    else:
        p = np.empty((n, n))
        bounds = np.linspace(0, n, threads + 1, dtype=int)

        def _rows(i: int) -> None:
            lo, hi = bounds[i], bounds[i + 1]
            p[lo:hi] = masked[lo:hi] @ l.L.T

        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(_rows, range(threads)))
    return np.triu(p, k=1)


def build_asym_state(
    x: np.ndarray, x_tilde: np.ndarray, l: CholFactor, threads: Optional[int] = None
) -> AsymState:
    """
    Compute dX @ X.T and the correction matrix P for one layer.

    Args:
        x: Quantized-path input, n x k
        x_tilde: Full-precision input, n x k
        l: Cholesky factor of the inverse Hessian
        threads: Passed to :func:`compute_p_fused`

    Returns:
        AsymState
    """
    if x.shape != x_tilde.shape:
        raise ShapeError(f"X {x.shape} and X_tilde {x_tilde.shape} must match")
    dx_xt = (x_tilde - x) @ x.T
    return AsymState(DX_XT=dx_xt, P=compute_p_fused(dx_xt, l, threads=threads))
