"""Exception types raised by asymcal."""

from typing import Optional


class AsymcalError(Exception):
    """Base class for all asymcal errors."""

    def context(self) -> dict:
        """Extra fields reported on the CLI error channel."""
        return {}


class ShapeError(AsymcalError, ValueError):
    """Operands have non-conformable shapes."""


class TensorFormatError(AsymcalError):
    """A tensor container could not be decoded."""


class DegenerateInputError(AsymcalError, ValueError):
    """Input carries no usable signal (e.g. all-zero activations)."""


class FactorizationError(AsymcalError):
    """Cholesky factorization hit a non-positive pivot."""

    def __init__(self, message: str, pivot: int):
        super().__init__(message)
        self.pivot = pivot

    def context(self) -> dict:
        return {"pivot": self.pivot}


class EliminationError(AsymcalError):
    """Gaussian elimination on a zero pivot."""


class CalibrationError(AsymcalError):
    """Layer calibration produced non-finite weights."""

    def __init__(
        self,
        message: str,
        column: Optional[int] = None,
        block: Optional[int] = None,
        layer: Optional[str] = None,
    ):
        super().__init__(message)
        self.column = column
        self.block = block
        self.layer = layer

    def context(self) -> dict:
        return {k: v for k, v in
                {"column": self.column, "block": self.block, "layer": self.layer}.items()
                if v is not None}


class CapabilityError(AsymcalError):
    """Problem size exceeds what a routine is built to handle."""


class ConfigError(AsymcalError, ValueError):
    """Invalid run configuration."""


class VerificationError(AsymcalError):
    """A benchmarked variant disagrees with its reference."""
