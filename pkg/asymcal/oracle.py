"""Slow reference implementations used to validate the calibration engine.

The residual-aware routines here track the residual of the fixed asymmetric
target W0 @ X_tilde against the current W @ X. When the Hessian is dampened
by lambda, X is augmented with sqrt(lambda) * I (and the target accordingly)
so the least-squares problem they solve is exactly the one the dampened
inverse Hessian describes.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .engine import LayerResult, asym_loss
from .exceptions import CapabilityError, EliminationError, ShapeError
from .linalg import build_hessian, ge_eliminate
from .quantizer import QuantParams, quantize_column

logger = logging.getLogger(__name__)

GREEDY_MAX_N = 16
NAIVE_MAX_N = 64


@dataclass
class SingleRowProblem:
    """min ||dw @ X - r||^2 for one output channel."""

    w: np.ndarray
    X: np.ndarray
    r: np.ndarray
    Hinv: np.ndarray

    def __post_init__(self):
        n = self.w.shape[0]
        if self.X.shape[0] != n or self.r.shape[0] != self.X.shape[1] or self.Hinv.shape != (n, n):
            raise ShapeError(
                f"Non-conformable problem: w {self.w.shape}, X {self.X.shape}, "
                f"r {self.r.shape}, Hinv {self.Hinv.shape}"
            )

    @classmethod
    def from_inputs(
        cls, w: np.ndarray, X: np.ndarray, X_tilde: np.ndarray, damp_lambda: float = 0.0
    ) -> "SingleRowProblem":
        """
        Build the problem for row ``w`` with residual r = w X_tilde - w X.

        Args:
            w: Weight row, length n
            X: Quantized-path input, n x k
            X_tilde: Full-precision input, n x k
            damp_lambda: Ridge term folded into an augmented X

        Returns:
            SingleRowProblem
        """
        w = np.asarray(w, dtype=np.float64).ravel()
        X, X_tilde = augment_inputs(X, X_tilde, damp_lambda)
        hinv = np.linalg.inv(X @ X.T)
        return cls(w=w, X=X, r=w @ X_tilde - w @ X, Hinv=0.5 * (hinv + hinv.T))


def augment_inputs(X: np.ndarray, X_tilde: np.ndarray, damp_lambda: float):
    """Append sqrt(lambda) * I to both inputs (no-op for lambda == 0)."""
    X = np.asarray(X, dtype=np.float64)
    X_tilde = np.asarray(X_tilde, dtype=np.float64)
    if damp_lambda <= 0:
        return X, X_tilde
    ridge = np.sqrt(damp_lambda) * np.eye(X.shape[0])
    return np.hstack([X, ridge]), np.hstack([X_tilde, ridge])


def _pivot(p: SingleRowProblem, q: int) -> float:
    d = p.Hinv[q, q]
    if d == 0:
        raise EliminationError(f"Zero inverse-Hessian pivot at index {q}")
    return d


def optimal_delta_w(p: SingleRowProblem, q: int, w_hat_q: float) -> np.ndarray:
    """
    Closed-form optimal update when weight q is fixed to ``w_hat_q``.

    dw = (w_hat_q - w_q) / Hinv_qq * Hinv[q, :] + r X^T Hinv_{-q}

    Args:
        p: Single-row problem
        q: Index being quantized
        w_hat_q: Quantized value of w_q

    Returns:
        Update row of length n
    """
    d = _pivot(p, q)
    first = (w_hat_q - p.w[q]) / d * p.Hinv[q, :]
    second = (p.r @ p.X.T) @ ge_eliminate(p.Hinv, q)
    return first + second


def loss_q(p: SingleRowProblem, q: int, w_hat_q: float) -> float:
    """
    Closed-form residual loss after quantizing index q optimally.

    Args:
        p: Single-row problem
        q: Index being quantized
        w_hat_q: Quantized value of w_q

    Returns:
        ||dw X - r||^2 at the optimal dw
    """
    d = _pivot(p, q)
    delta = w_hat_q - p.w[q]
    rx = p.r @ p.X.T
    return float(
        delta ** 2 / d
        + p.r @ p.r
        - rx @ ge_eliminate(p.Hinv, q) @ rx
        - 2.0 * delta / d * (rx @ p.Hinv[:, q])
    )


def kkt_delta_w(
    X: np.ndarray, r: np.ndarray, w: np.ndarray, q: int, w_hat_q: float
) -> np.ndarray:
    """
    Solve the same constrained least squares through the bordered KKT system.

    [[2 X X^T, e_q], [e_q^T, 0]] [dw; nu] = [2 X r^T; w_hat_q - w_q]

    Args:
        X: Input, n x k (already augmented if dampening is used)
        r: Residual target, length k
        w: Current weight row
        q: Constrained index
        w_hat_q: Required value of w_q + dw_q

    Returns:
        Update row of length n
    """
    n = X.shape[0]
    kkt = np.zeros((n + 1, n + 1))
    kkt[:n, :n] = 2.0 * (X @ X.T)
    kkt[n, q] = 1.0
    kkt[q, n] = 1.0
    rhs = np.zeros(n + 1)
    rhs[:n] = 2.0 * (X @ r)
    rhs[n] = w_hat_q - w[q]
    return np.linalg.solve(kkt, rhs)[:n]


@dataclass
class GreedyTrace:
    """Order chosen by the greedy procedure and the score of each pick."""

    order: List[int] = field(default_factory=list)
    scores: List[float] = field(default_factory=list)


def greedy_optimal_quantize(
    w: np.ndarray,
    X: np.ndarray,
    X_tilde: np.ndarray,
    params: QuantParams,
    damp_ratio: float = 0.01,
) -> Tuple[np.ndarray, GreedyTrace]:
    """
    Quantize one row picking, at every step, the index with minimal L_q.

    Args:
        w: Weight row, length n (n <= 16)
        X: Quantized-path input, n x k
        X_tilde: Full-precision input, n x k
        params: Grid fitted for the 1 x n row
        damp_ratio: Hessian dampening ratio

    Returns:
        Tuple of (quantized row, trace of the chosen order)
    """
    w0 = np.asarray(w, dtype=np.float64).ravel()
    n = w0.shape[0]
    if n > GREEDY_MAX_N:
        raise CapabilityError(f"Greedy optimal quantization is limited to n <= {GREEDY_MAX_N}, got {n}")

    lam = build_hessian(np.asarray(X, dtype=np.float64), damp_ratio).damp_lambda
    problem = SingleRowProblem.from_inputs(w0, X, X_tilde, lam)
    Xa, Xta = augment_inputs(X, X_tilde, lam)
    target = w0 @ Xta

    cur = w0.copy()
    remaining = list(range(n))
    trace = GreedyTrace()

    while remaining:
        candidates = []
        for q in remaining:
            _, w_hat_q = quantize_column(cur[q:q + 1], params, q)
            candidates.append((loss_q(problem, q, float(w_hat_q[0])), q, float(w_hat_q[0])))
        score, q, w_hat_q = min(candidates)

        cur = cur + optimal_delta_w(problem, q, w_hat_q)
        cur[q] = w_hat_q
        problem = SingleRowProblem(
            w=cur, X=Xa, r=target - cur @ Xa, Hinv=ge_eliminate(problem.Hinv, q)
        )
        remaining.remove(q)
        trace.order.append(q)
        trace.scores.append(score)

    return cur, trace


def naive_engine(
    W: np.ndarray,
    X: np.ndarray,
    X_tilde: np.ndarray,
    params: QuantParams,
    damp_ratio: float = 0.01,
) -> LayerResult:
    """
    First-to-last column calibration recomputing the full residual every step.

    Args:
        W: Weights, m x n (n <= 64)
        X: Quantized-path input, n x k
        X_tilde: Full-precision input, n x k
        params: Grid fitted for W
        damp_ratio: Hessian dampening ratio

    Returns:
        LayerResult
    """
    start = time.perf_counter()
    W0 = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    X_tilde = np.asarray(X_tilde, dtype=np.float64)
    m, n = W0.shape
    if n > NAIVE_MAX_N:
        raise CapabilityError(f"Naive engine is limited to n <= {NAIVE_MAX_N}, got {n}")

    h = build_hessian(X, damp_ratio)
    lam = h.damp_lambda
    hinv = np.linalg.inv(h.H)
    hinv = 0.5 * (hinv + hinv.T)

    cur = W0.copy()
    Q = np.zeros((m, n))
    for q in range(n):
        _, q_col = quantize_column(cur[:, q], params, q)
        Q[:, q] = q_col

        R = W0 @ X_tilde - cur @ X
        rxt = R @ X.T - lam * (cur - W0)
        hinv_q = ge_eliminate(hinv, q)
        delta = np.outer((q_col - cur[:, q]) / hinv[q, q], hinv[q, :]) + rxt @ hinv_q

        cur = cur + delta
        cur[:, q] = q_col
        hinv = hinv_q

    return LayerResult(
        Q=Q,
        params=params,
        sym_loss=asym_loss(Q, W0, X, X),
        asym_loss=asym_loss(Q, W0, X, X_tilde),
        elapsed=time.perf_counter() - start,
        name="naive",
    )
