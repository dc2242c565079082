"""Exception types shared across the package."""

from __future__ import annotations


class TrialRefineError(Exception):
    """Base class for package-specific failures."""


class DataFormatError(TrialRefineError):
    """Malformed binary payload; ``offset`` is the byte position of the defect."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class BadMagicError(DataFormatError):
    pass


class FormatVersionError(DataFormatError):
    pass


class TruncatedPayloadError(DataFormatError):
    pass


class DimOverflowError(DataFormatError):
    pass


class DataValidationError(TrialRefineError, ValueError):
    """Trial or dataset content violates an invariant (NaN/Inf, bad label, ...)."""


class NonFiniteGradientError(TrialRefineError, ArithmeticError):
    """An optimizer step received a gradient with NaN/Inf entries."""


class ConvergenceError(TrialRefineError, RuntimeError):
    """An iterative solver stopped without meeting its tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (final residual {residual:.3e})")
        self.residual = residual


class UnsupportedArchitectureError(TrialRefineError, ValueError):
    """The requested operation does not apply to this model architecture."""


class CapacityError(TrialRefineError, ValueError):
    """A size cap (e.g. dense-Hessian parameter limit) was exceeded."""


class ConfigError(TrialRefineError, ValueError):
    """Invalid or inconsistent run configuration."""
