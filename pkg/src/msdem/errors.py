"""Exception types shared across the package.

Every error raised on a user-facing path derives from ``MsdemError`` so the
CLI can map failures to a nonzero exit with a single machine-parsable line.
"""


class MsdemError(Exception):
    """Base class for all package errors."""


class ShapeError(MsdemError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericsError(MsdemError, ArithmeticError):
    """An operation produced NaN/Inf, or a numeric contract was violated."""


class ValidationError(MsdemError, ValueError):
    """Malformed input data (labels, one-hot vectors, task definitions)."""


class FrozenParameterError(MsdemError, RuntimeError):
    """Attempted to mutate or re-register a frozen parameter."""


class FeatureFileError(MsdemError, ValueError):
    """Structured parse error for feature files; carries a byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ManifestError(MsdemError, ValueError):
    """Invalid stream manifest content."""


class CheckpointError(MsdemError, ValueError):
    """Corrupt or unsupported checkpoint file; carries a byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(MsdemError, ValueError):
    """Invalid configuration; message lists every failure found."""
