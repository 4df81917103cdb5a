"""Deterministic toy networks and synthetic calibration data."""

import logging
from enum import Enum
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .matrix import Seed, gen_correlated, make_rng
from .pipeline import BLOCK_KINDS, Block, LinearLayer, ModelGraph

logger = logging.getLogger(__name__)

# Sub-stream id for weights under the model seed.
WEIGHT_STREAM = 1


class ModelKind(str, Enum):
    MLP = "mlp"
    TRANSFORMER = "transformer"


class ToySpec(BaseModel):
    """Shape and randomness of a toy model."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: ModelKind = ModelKind.MLP
    blocks: int = Field(default=4, ge=2, le=6)
    width: int = Field(default=32, ge=16, le=128)
    hidden_mult: int = Field(default=2, ge=1, le=4)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    decay: float = Field(default=0.9, gt=0.0, le=1.0)
    calib_decay: float = Field(default=0.5, gt=0.0, le=1.0)
    tokens_per_sample: int = Field(default=16, ge=1)

    @property
    def hidden(self) -> int:
        return self.width * self.hidden_mult


def spectral_weight(rng: np.random.Generator, rows: int, cols: int, decay: float) -> np.ndarray:
    """
    Random rows x cols matrix with singular values decay**i.

    The singular values are rescaled to unit mean square so every layer keeps
    activations at a similar scale.

    Args:
        rng: Generator to draw from
        rows: Output features
        cols: Input features
        decay: Spectrum decay in (0, 1]

    Returns:
        U diag(s) V^T with random orthonormal U, V
    """
    r = min(rows, cols)
    u, _ = np.linalg.qr(rng.standard_normal((rows, r)))
    v, _ = np.linalg.qr(rng.standard_normal((cols, r)))
    s = np.power(float(decay), np.arange(r))
    s = s / np.sqrt(np.mean(s * s))
    return (u * s) @ v.T


def _layer_shapes(spec: ToySpec):
    n, h = spec.width, spec.hidden
    return {
        "q_proj": (n, n),
        "k_proj": (n, n),
        "v_proj": (n, n),
        "o_proj": (n, n),
        "up_proj": (h, n),
        "down_proj": (n, h),
    }


def build_model(spec: ToySpec) -> ModelGraph:
    """
    Build the model described by ``spec``.

    Args:
        spec: Toy model description

    Returns:
        ModelGraph (bit-identical for a fixed spec)
    """
    shapes = _layer_shapes(spec)
    names = BLOCK_KINDS[spec.kind.value]
    blocks = []
    for b in range(spec.blocks):
        layers = {}
        for li, name in enumerate(names):
            rng = make_rng(Seed(spec.seed), WEIGHT_STREAM, b, li)
            rows, cols = shapes[name]
            layers[name] = LinearLayer(name, spectral_weight(rng, rows, cols, spec.decay))
        blocks.append(Block(kind=spec.kind.value, layers=layers))

    model = ModelGraph(
        blocks=blocks,
        width=spec.width,
        tokens_per_sample=spec.tokens_per_sample,
        seed=spec.seed,
        toy_spec=spec.model_dump(mode="json"),
    )
    model.validate()
    logger.info(f"Built {spec.kind.value} toy model: {spec.blocks} blocks, width {spec.width}")
    return model


def gen_calib(spec: ToySpec, samples: int = 128, tokens: Optional[int] = None) -> np.ndarray:
    """
    Correlated calibration activations for a toy model.

    Args:
        spec: Toy model description
        samples: Number of samples
        tokens: Tokens per sample (defaults to the spec's)

    Returns:
        width x (samples * tokens) matrix
    """
    if samples < 1:
        raise ValueError(f"samples must be at least 1, got {samples}")
    tokens = spec.tokens_per_sample if tokens is None else tokens
    if tokens < 1:
        raise ValueError(f"tokens must be at least 1, got {tokens}")
    return gen_correlated(Seed(spec.seed), spec.width, samples * tokens, spec.calib_decay)
