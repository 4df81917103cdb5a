"""Configuration models and the plain-text run config reader."""

import logging
import os
from enum import Enum
from pathlib import Path
from typing import Dict, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .exceptions import ConfigError
from .quantizer import WEIGHT_BITS, ActQuantConfig

logger = logging.getLogger(__name__)

THREADS_ENV = "ASYMCAL_THREADS"


class Mode(str, Enum):
    """Which weight-update terms are applied during calibration."""

    RTN = "rtn"
    GPTQ = "gptq"
    GPTAQ_SECOND_ONLY = "gptaq2"
    GPTAQ = "gptaq"

    @property
    def first_term(self) -> bool:
        return self in (Mode.GPTQ, Mode.GPTAQ)

    @property
    def second_term(self) -> bool:
        return self in (Mode.GPTAQ_SECOND_ONLY, Mode.GPTAQ)


class ClipSearch(str, Enum):
    MINMAX = "minmax"
    MSE = "mse"


class AQOrder(str, Enum):
    """When simulated activation quantization is switched on."""

    W_THEN_A = "wa"
    A_THEN_W = "aw"


class QuantConfig(BaseModel):
    """All knobs of a calibration run."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    bits: int = 4
    symmetric: bool = False
    group_size: Optional[int] = Field(default=None, ge=1)
    block_size: int = Field(default=128, ge=1)
    damp_ratio: float = Field(default=0.01, ge=0.0)
    act_order: bool = False
    mode: Mode = Mode.GPTAQ
    clip_search: ClipSearch = ClipSearch.MINMAX
    aq_order: AQOrder = AQOrder.A_THEN_W
    act_cfg: ActQuantConfig = ActQuantConfig()
    threads: Optional[int] = Field(default=None, ge=1)

    @field_validator("bits")
    @classmethod
    def _known_bits(cls, v: int) -> int:
        if v not in WEIGHT_BITS:
            raise ValueError(f"bits must be one of {WEIGHT_BITS}")
        return v


# Setups from the reference experiments.
PRESETS: Dict[str, Dict[str, object]] = {
    "language": {"damp": 0.01, "symmetric": False, "clip": "mse", "act_bits": 4, "act_clip": 0.9},
    "vision": {"damp": 0.10, "symmetric": False, "clip": "mse", "act_bits": 4, "act_clip": 0.9},
    "weight-only": {"bits": 3, "symmetric": True, "group_size": 128, "act_order": True, "damp": 0.01},
}


class RunConfig(BaseModel):
    """Flags and config-file keys of the CLI, validated before any compute."""

    model_config = ConfigDict(extra="forbid")

    toy: Optional[str] = None
    model: Optional[str] = None
    calib: Optional[str] = None
    bits: int = 4
    mode: Mode = Mode.GPTAQ
    symmetric: bool = False
    group_size: Optional[int] = Field(default=None, ge=1)
    block_size: int = Field(default=128, ge=1)
    damp: float = Field(default=0.01, ge=0.0)
    act_order: bool = False
    aq_order: AQOrder = AQOrder.A_THEN_W
    clip: ClipSearch = ClipSearch.MINMAX
    act_bits: Optional[int] = Field(default=None, ge=2, le=16)
    act_clip: float = Field(default=0.9, gt=0.0, le=1.0)
    seed: int = Field(default=0, ge=0)
    out: str = "asymcal_run"
    blocks: int = 4
    width: int = 32
    hidden_mult: int = 2
    decay: float = 0.9
    samples: int = Field(default=128, ge=1)
    tokens: int = Field(default=16, ge=1)
    spill: bool = False

    @field_validator("bits")
    @classmethod
    def _known_bits(cls, v: int) -> int:
        if v not in WEIGHT_BITS:
            raise ValueError(f"bits must be one of {WEIGHT_BITS}")
        return v

    @field_validator("toy")
    @classmethod
    def _known_toy(cls, v: Optional[str]) -> Optional[str]:
        if v is not None and v not in ("mlp", "transformer"):
            raise ValueError("toy must be 'mlp' or 'transformer'")
        return v

    @model_validator(mode="after")
    def _one_model_source(self) -> "RunConfig":
        if self.toy and self.model:
            raise ValueError("use either toy or model, not both")
        return self

    def act_config(self) -> ActQuantConfig:
        if self.act_bits is None:
            return ActQuantConfig(enabled=False, clip_ratio=self.act_clip)
        return ActQuantConfig(bits=self.act_bits, clip_ratio=self.act_clip, enabled=True)

    def quant_config(self, threads: Optional[int] = None, **overrides) -> QuantConfig:
        values = dict(
            bits=self.bits,
            symmetric=self.symmetric,
            group_size=self.group_size,
            block_size=self.block_size,
            damp_ratio=self.damp,
            act_order=self.act_order,
            mode=self.mode,
            clip_search=self.clip,
            aq_order=self.aq_order,
            act_cfg=self.act_config(),
            threads=threads,
        )
        values.update(overrides)
        return QuantConfig(**values)


def _coerce(value: str):
    lowered = value.lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    if lowered in ("none", "null", ""):
        return None
    return value


def read_config_file(path: Union[str, Path]) -> Dict[str, object]:
    """
    Read a ``key = value`` config file.

    Blank lines and lines starting with '#' are skipped. Keys use the flag
    names with dashes or underscores.

    Args:
        path: Config file path

    Returns:
        Dictionary of raw values
    """
    values: Dict[str, object] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key.replace("-", "_")] = _coerce(value)
    logger.info(f"Read {len(values)} setting(s) from {path}")
    return values


def build_run_config(
    file_values: Optional[Dict[str, object]] = None,
    flag_values: Optional[Dict[str, object]] = None,
    preset: Optional[str] = None,
) -> RunConfig:
    """
    Merge preset, config file and command-line flags (later sources win).

    Args:
        file_values: Values read from a config file
        flag_values: Values explicitly given on the command line
        preset: Optional preset name from ``PRESETS``

    Returns:
        Validated RunConfig
    """
    merged: Dict[str, object] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"Unknown preset '{preset}', choose from {sorted(PRESETS)}")
        merged.update(PRESETS[preset])
    merged.update(file_values or {})
    merged.update(flag_values or {})
    try:
        return RunConfig(**merged)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def resolve_threads() -> int:
    """Thread cap from ASYMCAL_THREADS, else the CPU count."""
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            value = int(raw)
        except ValueError as e:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from e
        if value < 1:
            raise ConfigError(f"{THREADS_ENV} must be at least 1, got {value}")
        return value
    return os.cpu_count() or 1
