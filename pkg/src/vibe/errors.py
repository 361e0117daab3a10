"""Exception hierarchy shared by every subsystem.

The CLI maps these onto process exit codes (see ``vibe.cli``).
"""


class VibeError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(VibeError, ValueError):
    """Invalid configuration, preset, or protocol request."""


class DimensionError(VibeError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(VibeError, RuntimeError):
    """A documented pre/post-condition of an operation was violated."""


class NumericError(VibeError, ArithmeticError):
    """A computation produced NaN or infinite values."""


class FormatError(VibeError, ValueError):
    """A file does not follow the expected on-disk layout."""


class TruncatedError(VibeError, OSError):
    """A file ended before its declared payload was complete."""


class ReportError(VibeError):
    """Evaluation inputs are inconsistent (e.g. subjects missing)."""
