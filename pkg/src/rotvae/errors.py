"""Exception types raised across the package."""


class RotVAEError(Exception):
    """Base class for all package errors."""


class InvalidDimensionError(RotVAEError, ValueError):
    pass


class ShapeError(RotVAEError, ValueError):
    pass


class ConfigError(RotVAEError, ValueError):
    pass


class FormatError(RotVAEError, ValueError):
    """Malformed file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConsistencyError(RotVAEError, ValueError):
    pass


class PriorMismatchError(RotVAEError):
    """A checkpoint was paired with a prior spec other than the one it was trained with."""


class TrainingDiverged(RotVAEError, FloatingPointError):
    pass
