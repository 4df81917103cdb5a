"""Calibration reports and their JSON/CSV exports."""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd

from .engine import LayerResult

logger = logging.getLogger(__name__)

REPORT_METADATA = {
    "mae_reduction": "mean of |X_tilde - X| over all elements",
    "eval_asym_loss": "||W_hat X - W X_tilde||^2 with both streams re-forwarded through the finished model",
    "group_order": "groups follow processing order (act-order permuted when act_order is on)",
    "params_fit": "once per layer on the original weights",
}


@dataclass
class BlockReport:
    """Metrics of one calibrated block."""

    block_index: int
    input_mae: float
    mae: float
    layers: List[LayerResult] = field(default_factory=list)
    peak_captures: int = 0
    capture_bytes: int = 0
    state_bytes: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "block_index": self.block_index,
            "input_mae": self.input_mae,
            "mae": self.mae,
            "peak_captures": self.peak_captures,
            "capture_bytes": self.capture_bytes,
            "state_bytes": self.state_bytes,
            "layers": [layer.to_dict() for layer in self.layers],
        }


@dataclass
class CalibReport:
    """Model-level result of calibrate_model.

    ``model`` holds the quantized model graph and is not serialized.
    """

    config: Dict[str, Any]
    blocks: List[BlockReport] = field(default_factory=list)
    elapsed: float = 0.0
    metadata: Dict[str, Any] = field(default_factory=lambda: dict(REPORT_METADATA))
    model: Optional[Any] = field(default=None, repr=False)

    @property
    def total_asym_loss(self) -> float:
        return float(sum(_eval_loss(layer) for block in self.blocks for layer in block.layers))

    @property
    def total_sym_loss(self) -> float:
        return float(sum(layer.sym_loss for block in self.blocks for layer in block.layers))

    @property
    def final_mae(self) -> float:
        return self.blocks[-1].mae if self.blocks else 0.0

    def input_maes(self) -> List[float]:
        return [block.input_mae for block in self.blocks]

    def layer_rows(self) -> List[Dict[str, Any]]:
        """One flat row per calibrated layer."""
        rows = []
        for block in self.blocks:
            for layer in block.layers:
                row = {"block": block.block_index, "block_input_mae": block.input_mae, "block_mae": block.mae}
                row.update(layer.to_dict())
                rows.append(row)
        return rows

    def summary(self) -> Dict[str, Any]:
        """
        Aggregate numbers of the run.

        Returns:
            Dictionary with totals, final MAE and per-block MAE lists
        """
        return {
            "blocks": len(self.blocks),
            "layers": sum(len(b.layers) for b in self.blocks),
            "total_asym_loss": self.total_asym_loss,
            "total_sym_loss": self.total_sym_loss,
            "final_mae": self.final_mae,
            "input_mae": self.input_maes(),
            "mae": [b.mae for b in self.blocks],
            "peak_captures": max((b.peak_captures for b in self.blocks), default=0),
            "elapsed_s": self.elapsed,
        }

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config": self.config,
            "summary": self.summary(),
            "metadata": self.metadata,
            "blocks": [b.to_dict() for b in self.blocks],
        }

    def to_json(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, default=_json_default)
        logger.info(f"Wrote report to {path}")

    def to_csv(self, path: Union[str, Path]) -> None:
        """
        Export one row per layer.

        Args:
            path: Output CSV path
        """
        df = pd.DataFrame(self.layer_rows())
        df.to_csv(path, index=False)
        logger.info(f"Exported {len(df)} layer rows to {path}")


def _eval_loss(layer: LayerResult) -> float:
    return layer.asym_loss if layer.eval_asym_loss is None else layer.eval_asym_loss


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "value"):
        return obj.value
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")
