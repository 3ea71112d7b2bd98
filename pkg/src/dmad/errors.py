"""Exception hierarchy shared by all engine modules."""


class DmadError(Exception):
    """Base class for all engine errors."""


class ValidationError(DmadError):
    """Input violates a documented precondition or invariant."""


class FormatError(DmadError):
    """On-disk artifact is malformed (bad magic, truncation, corrupt payload)."""


class StorageError(DmadError):
    """Filesystem-level failure while reading or writing an artifact."""


class NumericError(DmadError):
    """A computation produced non-finite intermediate values."""


class StateError(DmadError):
    """Operation invoked in an invalid order (e.g. backward without forward)."""


class EmptyBankError(DmadError):
    """A bank build produced zero rows; callers may fall back to another composition."""
