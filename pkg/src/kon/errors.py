"""Exception types shared across the package."""


class KonError(Exception):
    """Base class for all package-specific failures."""


class ShapeError(KonError, ValueError):
    """Tensor dimension mismatch; the message names both shapes."""


class ConfigError(KonError, ValueError):
    """Invalid or inconsistent configuration value."""


class IngestError(KonError, ValueError):
    """Malformed input data; the message carries file and line context."""


class NonFiniteError(KonError, ArithmeticError):
    """A NaN or Inf showed up where only finite values are allowed."""
