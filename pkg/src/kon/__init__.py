"""K-step head stack for knowledge-graph completion, desk scale."""

from . import ndops
from .errors import ConfigError, IngestError, KonError, NonFiniteError, ShapeError

__all__ = [
    "ndops",
    "KonError",
    "ShapeError",
    "ConfigError",
    "IngestError",
    "NonFiniteError",
]
