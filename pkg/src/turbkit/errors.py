"""Exception types shared across the package."""


class TurbkitError(Exception):
    """Base class for all turbkit domain errors."""


class ShapeError(TurbkitError):
    """Array shapes violate an operation's contract."""


class NonFiniteError(TurbkitError):
    """A NaN or Inf appeared where finite values are required."""


class DataError(TurbkitError):
    """A file or record is missing, unreadable, or malformed."""


class CheckpointError(DataError):
    """A checkpoint file failed validation (digest, version, or layout)."""
