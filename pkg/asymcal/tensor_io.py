"""Binary tensor container used for weights and spilled activations.

Layout (little-endian, no padding)::

    b"GTAQ"  u8 version (1)  u8 dtype (0=f32, 1=f64)  u32 rank (2)
    u64 rows  u64 cols  row-major payload
"""

import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .exceptions import ShapeError, TensorFormatError

logger = logging.getLogger(__name__)

MAGIC = b"GTAQ"
VERSION = 1
HEADER = struct.Struct("<4sBBIQQ")
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODE_FOR_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

PathLike = Union[str, Path]


def write_tensor(path: PathLike, m: np.ndarray) -> None:
    """
    Write a 2-D float32/float64 matrix to ``path``.

    Args:
        path: Destination file
        m: Matrix to store
    """
    if m.ndim != 2:
        raise ShapeError(f"Only rank-2 tensors are supported, got shape {m.shape}")
    code = CODE_FOR_DTYPE.get(np.dtype(m.dtype))
    if code is None:
        raise TensorFormatError(f"Unsupported dtype for tensor container: {m.dtype}")

    rows, cols = m.shape
    payload = np.ascontiguousarray(m, dtype=DTYPE_CODES[code]).tobytes()
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, code, 2, rows, cols))
        fh.write(payload)
    logger.debug(f"Wrote {rows}x{cols} {m.dtype} tensor to {path}")


def read_tensor(path: PathLike) -> np.ndarray:
    """
    Read a matrix written by :func:`write_tensor`.

    Args:
        path: Source file

    Returns:
        Matrix with the stored dtype
    """
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise TensorFormatError(f"{path}: truncated header ({len(data)} bytes)")

    magic, version, code, rank, rows, cols = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    if code not in DTYPE_CODES:
        raise TensorFormatError(f"{path}: unknown dtype code {code}")
    if rank != 2:
        raise TensorFormatError(f"{path}: unsupported rank {rank}")

    dtype = DTYPE_CODES[code]
    expected = rows * cols * dtype.itemsize
    payload = data[HEADER.size:]
    if len(payload) != expected:
        raise TensorFormatError(
            f"{path}: payload has {len(payload)} bytes, expected {expected}"
        )

    m = np.frombuffer(payload, dtype=dtype).reshape(rows, cols)
    if not np.all(np.isfinite(m)):
        raise TensorFormatError(f"{path}: tensor contains NaN or Inf")
    return m.astype(dtype.newbyteorder("="), copy=True)
