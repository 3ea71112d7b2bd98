"""Dual-memory-bank anomaly detection over precomputed patch features."""

__version__ = "0.1.0"

from dmad.errors import (
    DmadError,
    EmptyBankError,
    FormatError,
    NumericError,
    StateError,
    StorageError,
    ValidationError,
)

__all__ = [
    "DmadError",
    "EmptyBankError",
    "FormatError",
    "NumericError",
    "StateError",
    "StorageError",
    "ValidationError",
    "__version__",
]
