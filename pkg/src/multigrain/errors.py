"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError and
CheckpointError exit 2, DataError 3, NumericError 4.
"""


class MultigrainError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(MultigrainError):
    """Operands have incompatible or invalid shapes."""


class NumericError(MultigrainError):
    """A computation produced or received non-finite values."""


class StateError(MultigrainError):
    """An object was used in an order its lifecycle forbids."""


class MaskError(MultigrainError):
    """An attention mask leaves some query with no visible key."""


class ConfigError(MultigrainError):
    """A configuration value or combination is invalid."""


class DataError(MultigrainError):
    """Input data is missing, malformed, or inconsistent."""


class SequenceError(DataError):
    """A token sequence violates framing or length limits."""


class CheckpointError(MultigrainError):
    """A checkpoint file cannot be read or does not match."""
