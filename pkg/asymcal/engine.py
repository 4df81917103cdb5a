"""Per-layer calibration: RTN, GPTQ and GPTAQ with lazy-batch updates.

Columns are processed in blocks of ``block_size``. Inside a block every
iteration applies the fused update

    W[:, j:] += -E_j * L[j:, j]  +  W_j * P[j, j:]

where E_j is the scaled quantization error of column j and W_j the working
value of column j at the start of its iteration. The part of the update that
lands outside the block is deferred and applied once per block.
"""

import hashlib
import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .config import ClipSearch, Mode, QuantConfig
from .exceptions import CalibrationError, ShapeError
from .linalg import CholFactor, HessianState, build_asym_state, build_hessian, inverse_cholesky
from .quantizer import QuantParams, fit_params_minmax, fit_params_mse, quantize_column, quantize_rtn

logger = logging.getLogger(__name__)

NAN_CHECK_EVERY = 16


@dataclass
class LayerCalibState:
    """Working state of one calibrate_layer call, in processing order."""

    W: np.ndarray
    Q: np.ndarray
    L: Optional[CholFactor]
    P: np.ndarray
    perm: np.ndarray
    params: QuantParams
    block_size: int
    dead: np.ndarray
    hessian: Optional[HessianState] = None

    @property
    def state_bytes(self) -> int:
        """Bytes held by H, L and P for this layer."""
        total = self.P.nbytes
        if self.L is not None:
            total += self.L.L.nbytes
        if self.hessian is not None:
            total += self.hessian.H.nbytes
        return total


@dataclass
class LayerResult:
    """Quantized weights and error metrics of one layer."""

    Q: np.ndarray
    params: QuantParams
    sym_loss: float
    asym_loss: float
    elapsed: float
    perm: Optional[np.ndarray] = None
    state_bytes: int = 0
    name: str = ""
    eval_asym_loss: Optional[float] = None

    def g_idx(self) -> np.ndarray:
        """Grid group of every column of Q, in the original column order."""
        n = self.Q.shape[1]
        position = np.arange(n) if self.perm is None else invert_perm(self.perm)
        if self.params.group_size is None:
            return np.zeros(n, dtype=np.int64)
        return position // self.params.group_size

    def params_dict(self) -> dict:
        """Grid parameters plus the column-to-group map needed to decode Q."""
        out = self.params.to_dict()
        out["g_idx"] = self.g_idx().tolist()
        out["perm"] = None if self.perm is None else self.perm.tolist()
        return out

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "rows": int(self.Q.shape[0]),
            "cols": int(self.Q.shape[1]),
            "sym_loss": self.sym_loss,
            "asym_loss": self.asym_loss,
            "eval_asym_loss": self.eval_asym_loss,
            "elapsed_s": self.elapsed,
            "state_bytes": self.state_bytes,
            "act_order": self.perm is not None,
        }


@dataclass
class TraceRecord:
    """One iteration of the column loop (recorded only on request)."""

    position: int
    column: int
    working: np.ndarray
    p_row: np.ndarray
    q_hash: str = field(repr=False, default="")


def column_hash(values: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(values).tobytes()).hexdigest()


def asym_loss(w_hat: np.ndarray, w: np.ndarray, x: np.ndarray, x_tilde: np.ndarray) -> float:
    """
    Squared Frobenius norm of W_hat @ X - W @ X_tilde.

    Args:
        w_hat: Quantized weights, m x n
        w: Full-precision weights, m x n
        x: Quantized-path input, n x k
        x_tilde: Full-precision input, n x k

    Returns:
        Loss value
    """
    if w_hat.shape != w.shape or x.shape != x_tilde.shape or w.shape[1] != x.shape[0]:
        raise ShapeError(
            f"Non-conformable shapes: W_hat {w_hat.shape}, W {w.shape}, X {x.shape}, X_tilde {x_tilde.shape}"
        )
    diff = w_hat @ x - w @ x_tilde
    return float(np.sum(diff * diff))


def act_order_perm(h: HessianState) -> np.ndarray:
    """
    Columns sorted by descending Hessian diagonal (stable on ties).

    Args:
        h: Hessian state

    Returns:
        Permutation array; position i holds the original column processed i-th
    """
    return np.argsort(-h.diag, kind="stable")


def invert_perm(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return inv


def _fit_params(w: np.ndarray, cfg: QuantConfig) -> QuantParams:
    fit = fit_params_mse if cfg.clip_search == ClipSearch.MSE else fit_params_minmax
    return fit(w, cfg.bits, cfg.symmetric, cfg.group_size)


def prepare_layer(
    W: np.ndarray, X: np.ndarray, X_tilde: np.ndarray, cfg: QuantConfig
) -> LayerCalibState:
    """
    Build the Hessian, factor, P, permutation and grids for a layer.

    Args:
        W: Full-precision weights, m x n
        X: Quantized-path input, n x k
        X_tilde: Full-precision input, n x k
        cfg: Calibration settings

    Returns:
        LayerCalibState with every matrix already in processing order
    """
    W = np.array(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    X_tilde = np.asarray(X_tilde, dtype=np.float64)
    m, n = W.shape
    if X.ndim != 2 or X.shape[0] != n:
        raise ShapeError(f"Input X {X.shape} does not match weight columns n={n}")
    if X_tilde.shape != X.shape:
        raise ShapeError(f"X_tilde {X_tilde.shape} must match X {X.shape}")

    block_size = min(cfg.block_size, n)
    needs_hessian = cfg.mode != Mode.RTN or cfg.act_order

    hessian = build_hessian(X, cfg.damp_ratio) if needs_hessian else None
    perm = act_order_perm(hessian) if cfg.act_order else np.arange(n)

    if cfg.act_order:
        W = W[:, perm]
        X = X[perm]
        X_tilde = X_tilde[perm]
        hessian = HessianState(
            H=hessian.H[np.ix_(perm, perm)],
            damp_lambda=hessian.damp_lambda,
            n=n,
            dead_channels=invert_perm(perm)[hessian.dead_channels],
        )

    params = _fit_params(W, cfg)
    dead = np.zeros(n, dtype=bool)
    L = None
    P = np.zeros((n, n))
    if cfg.mode != Mode.RTN:
        dead[hessian.dead_channels] = True
        L = inverse_cholesky(hessian)
        if cfg.mode.second_term:
            P = build_asym_state(X, X_tilde, L, threads=cfg.threads).P

    return LayerCalibState(
        W=W,
        Q=np.zeros((m, n)),
        L=L,
        P=P,
        perm=perm,
        params=params,
        block_size=block_size,
        dead=dead,
        hessian=hessian,
    )


def _check_finite(W: np.ndarray, upto: int, perm: np.ndarray) -> None:
    bad = ~np.all(np.isfinite(W), axis=0)
    if np.any(bad):
        position = int(np.flatnonzero(bad)[0])
        column = int(perm[position])
        raise CalibrationError(
            f"Non-finite weights in column {column} after {upto} processed column(s)",
            column=column,
        )


def run_columns(
    state: LayerCalibState, mode: Mode, trace: Optional[List[TraceRecord]] = None
) -> None:
    """
    Quantize all columns of ``state.W`` in place into ``state.Q``.

    Args:
        state: Prepared layer state
        mode: Which update terms to apply (GPTQ, GPTAQ_SECOND_ONLY, GPTAQ)
        trace: Optional list receiving one TraceRecord per column
    """
    W, Q, P = state.W, state.Q, state.P
    L = state.L.L
    m, n = W.shape
    B = state.block_size
    zeros = np.zeros(m)

    for i1 in range(0, n, B):
        i2 = min(i1 + B, n)
        E = np.zeros((m, i2 - i1))
        W_start = np.zeros((m, i2 - i1))

        for j in range(i1, i2):
            w = W[:, j].copy()
            _, q = quantize_column(w, state.params, j)
            Q[:, j] = q

            if trace is not None:
                trace.append(TraceRecord(
                    position=j,
                    column=int(state.perm[j]),
                    working=w,
                    p_row=P[j, j + 1:].copy(),
                    q_hash=column_hash(q),
                ))

            if state.dead[j]:
                continue

            e = (w - q) / L[j, j] if mode.first_term else zeros
            W[:, j:i2] += -np.outer(e, L[j:i2, j]) + np.outer(w, P[j, j:i2])
            E[:, j - i1] = e
            W_start[:, j - i1] = w

            if (j + 1) % NAN_CHECK_EVERY == 0:
                _check_finite(W[:, j:], j + 1, state.perm[j:])

        if i2 < n:
            W[:, i2:] += -E @ L[i2:, i1:i2].T + W_start @ P[i1:i2, i2:]

    _check_finite(Q, n, state.perm)


def calibrate_layer(
    W: np.ndarray,
    X: np.ndarray,
    X_tilde: np.ndarray,
    cfg: QuantConfig,
    trace: Optional[List[TraceRecord]] = None,
) -> LayerResult:
    """
    Quantize one linear layer.

    Args:
        W: Full-precision weights, m x n
        X: Quantized-path input, n x k
        X_tilde: Full-precision input, n x k (may equal X for RTN/GPTQ)
        cfg: Calibration settings
        trace: Optional list receiving per-iteration TraceRecords

    Returns:
        LayerResult with Q in the original column order
    """
    start = time.perf_counter()
    state = prepare_layer(W, X, X_tilde, cfg)

    if cfg.mode == Mode.RTN:
        _, q = quantize_rtn(state.W, state.params)
        state.Q = q
    else:
        run_columns(state, cfg.mode, trace)

    Q = state.Q[:, invert_perm(state.perm)] if cfg.act_order else state.Q
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    X_tilde = np.asarray(X_tilde, dtype=np.float64)
    sym = asym_loss(Q, W, X, X)
    asym = asym_loss(Q, W, X, X_tilde)
    elapsed = time.perf_counter() - start

    logger.debug(
        f"{cfg.mode.value}: {W.shape[0]}x{W.shape[1]} layer, sym_loss={sym:.4g}, "
        f"asym_loss={asym:.4g}, {elapsed * 1e3:.1f} ms"
    )
    return LayerResult(
        Q=Q,
        params=state.params,
        sym_loss=sym,
        asym_loss=asym,
        elapsed=elapsed,
        perm=state.perm if cfg.act_order else None,
        state_bytes=state.state_bytes,
    )
