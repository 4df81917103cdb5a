"""asymcal - Asymmetric post-training quantization (GPTQ/GPTAQ) for linear layers."""

__version__ = "1.0.0"

import logging

from .config import AQOrder, ClipSearch, Mode, QuantConfig
from .engine import LayerResult, calibrate_layer
from .pipeline import ModelGraph, calibrate_model, load_model, save_model
from .quantizer import ActQuantConfig, QuantParams
from .report import BlockReport, CalibReport
from .toymodel import ToySpec, build_model, gen_calib

logging.getLogger(__name__).addHandler(logging.NullHandler())

__all__ = [
    "AQOrder",
    "ActQuantConfig",
    "BlockReport",
    "CalibReport",
    "ClipSearch",
    "LayerResult",
    "Mode",
    "ModelGraph",
    "QuantConfig",
    "QuantParams",
    "ToySpec",
    "build_model",
    "calibrate_layer",
    "calibrate_model",
    "gen_calib",
    "load_model",
    "save_model",
]
