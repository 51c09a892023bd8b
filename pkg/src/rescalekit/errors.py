"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes, so new error types should
subclass one of the categories below rather than raising bare ValueError.
"""

from __future__ import annotations


class RescalekitError(Exception):
    """Base class for all package-specific failures."""


class DimensionError(RescalekitError, ValueError):
    """Array rank, shape, or divisibility requirement violated."""


class ParameterError(RescalekitError, ValueError):
    """Scalar argument outside its documented domain."""


class ConfigError(RescalekitError, ValueError):
    """Malformed plan, weight manifest, or CLI configuration."""


class SingularSystemError(RescalekitError, ArithmeticError):
    """Calibration least-squares system is rank deficient.

    Carries the flattened index of the first basis column whose direction
    is undetermined by the calibration data.
    """

    def __init__(self, message: str, column: int | None = None):
        super().__init__(message)
        self.column = column


class TruncationError(RescalekitError, ValueError):
    """Probe extent too small: impulse response reaches the border."""


class NumericalError(RescalekitError, ArithmeticError):
    """A numerical check failed at runtime (divergence, singularity)."""


class FormatError(RescalekitError, IOError):
    """Tensor container bytes do not parse."""
