"""Affine quantization grids for weights and activations.

Weights are fitted per output channel (one scale per row of W) or per group of
``group_size`` consecutive input columns. Asymmetric grids use the integer
range [0, 2^b - 1] with an integer zero point; symmetric grids use
[-2^(b-1), 2^(b-1) - 1] without one. Both always include 0 in the fitted
range. A bit-width of 16 or more is treated as full precision (pass-through).
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .exceptions import ShapeError

logger = logging.getLogger(__name__)

WEIGHT_BITS = (2, 3, 4, 8, 16)
PASSTHROUGH_BITS = 16
SCALE_FLOOR = 1e-12
# Shrink factors 1.00, 0.99, ..., 0.20 for the MSE clip search.
SHRINK_GRID = np.array([(100 - i) / 100.0 for i in range(81)])


class ActQuantConfig(BaseModel):
    """Per-token activation quantization settings."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    bits: int = Field(default=4, ge=2, le=16)
    clip_ratio: float = Field(default=0.9, gt=0.0, le=1.0)
    enabled: bool = False

    @property
    def active(self) -> bool:
        return self.enabled and self.bits < PASSTHROUGH_BITS


@dataclass
class QuantParams:
    """Fitted affine grid for an m x n weight matrix.

    ``scale`` and ``zero_point`` have shape (m, groups); per-channel fits have a
    single group spanning all columns.
    """

    bits: int
    scale: np.ndarray
    zero_point: Optional[np.ndarray]
    group_size: Optional[int]
    symmetric: bool
    floored: np.ndarray = field(default=None)

    @property
    def passthrough(self) -> bool:
        return self.bits >= PASSTHROUGH_BITS

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1)) if self.symmetric else 0

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.symmetric else 2 ** self.bits - 1

    def group_of(self, column: int) -> int:
        return 0 if self.group_size is None else column // self.group_size

    def column_grid(self, column: int) -> Tuple[np.ndarray, np.ndarray]:
        """Scale and zero point vectors (length m) used for ``column``."""
        g = self.group_of(column)
        zero = self.zero_point[:, g] if self.zero_point is not None else np.zeros(self.scale.shape[0])
        return self.scale[:, g], zero

    def to_dict(self) -> dict:
        return {
            "bits": self.bits,
            "symmetric": self.symmetric,
            "group_size": self.group_size,
            "scale": self.scale.tolist(),
            "zero_point": None if self.zero_point is None else self.zero_point.astype(int).tolist(),
            "floored_scales": int(np.count_nonzero(self.floored)) if self.floored is not None else 0,
        }


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _check_bits(bits: int) -> None:
    if bits not in WEIGHT_BITS:
        raise ValueError(f"bits must be one of {WEIGHT_BITS}, got {bits}")


def _grouped(w: np.ndarray, group_size: Optional[int]) -> np.ndarray:
    """Reshape an m x n matrix into (m, groups, group_len)."""
    m, n = w.shape
    if group_size is None:
        return w.reshape(m, 1, n)
    if group_size < 1 or n % group_size != 0:
        raise ShapeError(f"group_size {group_size} must divide the channel length {n}")
    return w.reshape(m, n // group_size, group_size)


def _affine_grid(xmin: np.ndarray, xmax: np.ndarray, bits: int, symmetric: bool):
    """Scale, zero point and floor mask for ranges [xmin, xmax] (which contain 0)."""
    if symmetric:
        qpos = 2 ** (bits - 1) - 1
        amax = np.maximum(np.abs(xmin), np.abs(xmax))
        scale = amax / max(qpos, 1)
        zero = None
    else:
        qmax = 2 ** bits - 1
        scale = (xmax - xmin) / qmax
    floored = scale < SCALE_FLOOR
    scale = np.where(floored, SCALE_FLOOR, scale)
    if not symmetric:
        zero = np.clip(round_half_away(-xmin / scale), 0, 2 ** bits - 1)
    return scale, zero, floored


def _fake_quant(w: np.ndarray, scale, zero, qmin: int, qmax: int):
    q = np.clip(round_half_away(w / scale + zero), qmin, qmax)
    return q, (q - zero) * scale


def _ranges(groups: np.ndarray):
    xmin = np.minimum(groups.min(axis=2), 0.0)
    xmax = np.maximum(groups.max(axis=2), 0.0)
    return xmin, xmax


def _passthrough_params(w: np.ndarray, bits: int, symmetric: bool, group_size: Optional[int]):
    groups = _grouped(w, group_size)
    shape = groups.shape[:2]
    return QuantParams(
        bits=bits,
        scale=np.ones(shape),
        zero_point=None if symmetric else np.zeros(shape),
        group_size=group_size,
        symmetric=symmetric,
        floored=np.zeros(shape, dtype=bool),
    )


def _warn_floored(floored: np.ndarray) -> None:
    if np.any(floored):
        logger.warning(f"{int(np.count_nonzero(floored))} constant-zero channel(s)/group(s); scale floored to {SCALE_FLOOR}")


def fit_params_minmax(
    w_rows: np.ndarray, bits: int, symmetric: bool, group_size: Optional[int] = None
) -> QuantParams:
    """
    Fit grids that map each channel's (or group's) min/max onto the integer range.

    Args:
        w_rows: Weight matrix, m x n (rows are output channels)
        bits: Bit-width (2, 3, 4, 8, or 16 for pass-through)
        symmetric: Symmetric grid without zero point
        group_size: Columns per group, or None for per-channel

    Returns:
        QuantParams
    """
    _check_bits(bits)
    w_rows = np.asarray(w_rows, dtype=np.float64)
    if bits >= PASSTHROUGH_BITS:
        return _passthrough_params(w_rows, bits, symmetric, group_size)

    xmin, xmax = _ranges(_grouped(w_rows, group_size))
    scale, zero, floored = _affine_grid(xmin, xmax, bits, symmetric)
    _warn_floored(floored)
    return QuantParams(bits, scale, zero, group_size, symmetric, floored)


def fit_params_mse(
    w_rows: np.ndarray, bits: int, symmetric: bool, group_size: Optional[int] = None
) -> QuantParams:
    """
    Fit grids by searching the shrink factor that minimizes squared error.

    Each channel/group evaluates the 81 shrink factors in ``SHRINK_GRID``
    applied to its min/max range and keeps the one with the smallest
    ``||w - deq(quant(w))||^2``; ties go to the larger factor.

    Args:
        w_rows: Weight matrix, m x n
        bits: Bit-width
        symmetric: Symmetric grid without zero point
        group_size: Columns per group, or None for per-channel

    Returns:
        QuantParams
    """
    _check_bits(bits)
    w_rows = np.asarray(w_rows, dtype=np.float64)
    if bits >= PASSTHROUGH_BITS:
        return _passthrough_params(w_rows, bits, symmetric, group_size)

    groups = _grouped(w_rows, group_size)
    xmin, xmax = _ranges(groups)
    qmin = -(2 ** (bits - 1)) if symmetric else 0
    qmax = 2 ** (bits - 1) - 1 if symmetric else 2 ** bits - 1

    best_err = np.full(xmin.shape, np.inf)
    best_scale = np.zeros(xmin.shape)
    best_zero = None if symmetric else np.zeros(xmin.shape)
    best_floored = np.zeros(xmin.shape, dtype=bool)

    for s in SHRINK_GRID:
        scale, zero, floored = _affine_grid(s * xmin, s * xmax, bits, symmetric)
        z = 0.0 if zero is None else zero[..., None]
        _, deq = _fake_quant(groups, scale[..., None], z, qmin, qmax)
        err = np.sum((groups - deq) ** 2, axis=2)
        better = err < best_err
        best_err = np.where(better, err, best_err)
        best_scale = np.where(better, scale, best_scale)
        best_floored = np.where(better, floored, best_floored)
        if zero is not None:
            best_zero = np.where(better, zero, best_zero)

    _warn_floored(best_floored)
    return QuantParams(bits, best_scale, best_zero, group_size, symmetric, best_floored)


def quantize_rtn(w: np.ndarray, p: QuantParams) -> Tuple[np.ndarray, np.ndarray]:
    """
    Round-to-nearest quantization of a full matrix with fitted params.

    Args:
        w: Weight matrix, m x n
        p: Params fitted for the same shape

    Returns:
        Tuple of (integer codes, dequantized weights)
    """
    w = np.asarray(w, dtype=np.float64)
    groups = _grouped(w, p.group_size)
    if groups.shape[:2] != p.scale.shape:
        raise ShapeError(f"Params for {p.scale.shape} groups do not fit weights {w.shape}")
    if p.passthrough:
        return w.copy(), w.copy()

    zero = 0.0 if p.zero_point is None else p.zero_point[..., None]
    q, deq = _fake_quant(groups, p.scale[..., None], zero, p.qmin, p.qmax)
    return q.reshape(w.shape), deq.reshape(w.shape)


def quantize_column(w_col: np.ndarray, p: QuantParams, column: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Quantize one weight column (length m) on the grid of ``column``.

    Args:
        w_col: Column values
        p: Fitted params
        column: Column index in processing order (selects the group)

    Returns:
        Tuple of (integer codes, dequantized values)
    """
    if p.passthrough:
        return w_col.copy(), w_col.copy()
    scale, zero = p.column_grid(column)
    return _fake_quant(w_col, scale, zero, p.qmin, p.qmax)


def quantize_activations(x: np.ndarray, cfg: ActQuantConfig) -> np.ndarray:
    """
    Simulated per-token asymmetric activation quantization.

    Each token (column of X) uses the range clip_ratio * [min, max] of that
    token, then is rounded, clamped and dequantized.

    Args:
        x: Activations, n x k
        cfg: Activation quantization settings

    Returns:
        Dequantized activations (a copy; unchanged copy when disabled)
    """
    if not cfg.active:
        return np.array(x, dtype=np.float64, copy=True)

    x = np.asarray(x, dtype=np.float64)
    xmin = cfg.clip_ratio * np.minimum(x.min(axis=0), 0.0)
    xmax = cfg.clip_ratio * np.maximum(x.max(axis=0), 0.0)
    scale, zero, _ = _affine_grid(xmin, xmax, cfg.bits, symmetric=False)
    _, deq = _fake_quant(x, scale[None, :], zero[None, :], 0, 2 ** cfg.bits - 1)
    return deq
