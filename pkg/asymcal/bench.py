"""Latency harness for the P computation and per-layer calibration."""

import logging
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .config import Mode, QuantConfig, resolve_threads
from .engine import calibrate_layer
from .exceptions import CapabilityError, VerificationError
from .linalg import build_hessian, compute_p_fused, compute_p_reference, inverse_cholesky
from .matrix import Seed, gen_correlated, make_rng
from .oracle import NAIVE_MAX_N, naive_engine

logger = logging.getLogger(__name__)

WARMUP = 2
MIN_REPS = 5
DEFAULT_REPS = 9
REFERENCE_MAX_N = 2048
LAYER_MAX_N = 4096
P_TOLERANCE = 1e-8
CSV_COLUMNS = ["variant", "n", "k", "reps", "median_us", "iqr_us", "threads", "dtype"]


class Variant(str, Enum):
    P_REFERENCE = "P_reference"
    P_FUSED = "P_fused"
    GPTQ_LAYER = "GPTQ_layer"
    GPTAQ_LAYER = "GPTAQ_layer"


@dataclass
class BenchResult:
    """Timing summary of one variant at one size (durations in seconds)."""

    n: int
    variant: Variant
    median: float
    iqr: float
    reps: int
    k: int = 0
    threads: int = 1
    dtype: str = "f64"
    overhead_ratio: Optional[float] = None

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if self.reps < MIN_REPS:
            raise ValueError(f"reps must be at least {MIN_REPS}, got {self.reps}")
        if self.median <= 0:
            raise ValueError(f"median must be positive, got {self.median}")

    def to_row(self) -> dict:
        row = {
            "variant": self.variant.value,
            "n": self.n,
            "k": self.k,
            "reps": self.reps,
            "median_us": self.median * 1e6,
            "iqr_us": self.iqr * 1e6,
            "threads": self.threads,
            "dtype": self.dtype,
        }
        if self.overhead_ratio is not None:
            row["overhead_ratio"] = self.overhead_ratio
        return row


def time_call(fn: Callable[[], object], reps: int, warmup: int = WARMUP) -> Tuple[float, float]:
    """
    Wall-clock median and interquartile range of ``fn``.

    Args:
        fn: Zero-argument callable to time
        reps: Measured repetitions
        warmup: Untimed calls made first

    Returns:
        Tuple of (median seconds, IQR seconds)
    """
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    q1, med, q3 = np.percentile(times, [25, 50, 75])
    # Timer resolution can yield 0 for trivial sizes.
    return max(float(med), 1e-9), float(q3 - q1)


def _check_sizes(sizes: Sequence[int], cap: int, what: str) -> None:
    for n in sizes:
        if n < 1:
            raise ValueError(f"Benchmark sizes must be positive, got {n}")
        if n > cap:
            raise CapabilityError(f"{what} is capped at n <= {cap}, got {n}")


def _check_reps(reps: int) -> None:
    if reps < MIN_REPS:
        raise ValueError(f"reps must be at least {MIN_REPS}, got {reps}")


def _layer_inputs(n: int, k: int, seed: int):
    x = gen_correlated(Seed(seed), n, k, 0.5)
    noise = make_rng(Seed(seed), 2).standard_normal((n, k))
    return x, x + 0.05 * noise


def bench_p(
    sizes: Sequence[int],
    reps: int = DEFAULT_REPS,
    k: int = 256,
    seed: int = 0,
    threads: Optional[int] = None,
) -> List[BenchResult]:
    """
    Time the row-loop reference against the fused masked GEMM for P.

    The fused timing includes forming dX @ X.T. Both results are compared
    before any timing.

    Args:
        sizes: Values of n
        reps: Measured repetitions per variant
        k: Calibration columns
        seed: Data seed
        threads: Thread count for the fused kernel (ASYMCAL_THREADS by default)

    Returns:
        Two BenchResults per size
    """
    _check_reps(reps)
    _check_sizes(sizes, REFERENCE_MAX_N, "P reference")
    threads = threads or resolve_threads()
    results = []
    for n in sizes:
        x, x_tilde = _layer_inputs(n, k, seed)
        dx = x_tilde - x
        factor = inverse_cholesky(build_hessian(x, 0.01))

        def reference():
            return compute_p_reference(dx, x, factor)

        def fused():
            return compute_p_fused(dx @ x.T, factor, threads=threads)

        diff = float(np.max(np.abs(reference() - fused())))
        if diff > P_TOLERANCE:
            raise VerificationError(f"Fused P differs from reference by {diff:.3g} at n={n}")

        for variant, fn in ((Variant.P_REFERENCE, reference), (Variant.P_FUSED, fused)):
            med, iqr = time_call(fn, reps)
            results.append(BenchResult(n=n, variant=variant, median=med, iqr=iqr, reps=reps, k=k, threads=threads))
            logger.info(f"{variant.value} n={n}: median {med * 1e3:.3f} ms")
    return results


def bench_layer(
    sizes: Sequence[int],
    reps: int = DEFAULT_REPS,
    k: int = 256,
    bits: int = 4,
    seed: int = 0,
    threads: Optional[int] = None,
) -> List[BenchResult]:
    """
    Time calibrate_layer in GPTQ and GPTAQ modes on square layers.

    Args:
        sizes: Values of n (layers are n x n)
        reps: Measured repetitions per variant
        k: Calibration columns
        bits: Weight bit-width
        seed: Data seed
        threads: Thread count recorded and passed to the fused kernel

    Returns:
        Two BenchResults per size; GPTAQ rows carry the overhead ratio
    """
    _check_reps(reps)
    _check_sizes(sizes, LAYER_MAX_N, "Layer benchmark")
    threads = threads or resolve_threads()
    results = []
    for n in sizes:
        x, x_tilde = _layer_inputs(n, k, seed)
        w = make_rng(Seed(seed), 3).standard_normal((n, n))
        gptq_cfg = QuantConfig(bits=bits, mode=Mode.GPTQ, threads=threads)
        gptaq_cfg = QuantConfig(bits=bits, mode=Mode.GPTAQ, threads=threads)

        _verify_layer(w, x, gptq_cfg, gptaq_cfg)

        gptq_med, gptq_iqr = time_call(lambda: calibrate_layer(w, x, x, gptq_cfg), reps)
        gptaq_med, gptaq_iqr = time_call(lambda: calibrate_layer(w, x, x_tilde, gptaq_cfg), reps)
        ratio = gptaq_med / gptq_med
        results.append(BenchResult(n, Variant.GPTQ_LAYER, gptq_med, gptq_iqr, reps, k, threads, overhead_ratio=1.0))
        results.append(BenchResult(n, Variant.GPTAQ_LAYER, gptaq_med, gptaq_iqr, reps, k, threads, overhead_ratio=ratio))
        logger.info(f"Layer n={n}: GPTQ {gptq_med * 1e3:.2f} ms, GPTAQ {gptaq_med * 1e3:.2f} ms ({ratio:.2f}x)")
    return results


def _verify_layer(w: np.ndarray, x: np.ndarray, gptq_cfg: QuantConfig, gptaq_cfg: QuantConfig) -> None:
    gptq = calibrate_layer(w, x, x, gptq_cfg)
    gptaq = calibrate_layer(w, x, x, gptaq_cfg)
    if not np.array_equal(gptq.Q, gptaq.Q):
        raise VerificationError(f"GPTAQ without input residual differs from GPTQ at n={w.shape[1]}")
    if w.shape[1] <= NAIVE_MAX_N:
        naive = naive_engine(w, x, x, gptq.params, damp_ratio=gptq_cfg.damp_ratio)
        diff = float(np.max(np.abs(naive.Q - gptq.Q)))
        if diff > 1e-9:
            raise VerificationError(f"GPTQ differs from the naive engine by {diff:.3g} at n={w.shape[1]}")


def write_csv(results: Sequence[BenchResult], path: Union[str, Path]) -> None:
    """
    Write results with the benchmark CSV schema.

    Args:
        results: Benchmark results
        path: Output CSV path
    """
    df = pd.DataFrame([r.to_row() for r in results])
    columns = CSV_COLUMNS + (["overhead_ratio"] if "overhead_ratio" in df.columns else [])
    df = df.reindex(columns=columns)
    df.to_csv(path, index=False, float_format="%.17g")
    logger.info(f"Exported {len(df)} benchmark rows to {path}")


def read_csv(path: Union[str, Path]) -> List[BenchResult]:
    """Parse a benchmark CSV written by :func:`write_csv`."""
    df = pd.read_csv(path)
    results = []
    for row in df.to_dict(orient="records"):
        ratio = row.get("overhead_ratio")
        results.append(BenchResult(
            n=int(row["n"]),
            variant=Variant(row["variant"]),
            median=float(row["median_us"]) / 1e6,
            iqr=float(row["iqr_us"]) / 1e6,
            reps=int(row["reps"]),
            k=int(row["k"]),
            threads=int(row["threads"]),
            dtype=str(row["dtype"]),
            overhead_ratio=None if ratio is None or pd.isna(ratio) else float(ratio),
        ))
    return results

