"""Exception types raised across the package."""


class SegMateError(Exception):
    """Base class for all errors raised by segmate."""


class ShapeError(SegMateError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class UsageError(SegMateError, RuntimeError):
    """An API was called in a state where it cannot proceed."""


class ConfigError(SegMateError, ValueError):
    """A configuration object violates one of its invariants.

    The offending field is available as ``field``.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class RangeError(SegMateError, ValueError):
    """A scalar argument lies outside its admissible interval."""


class DataError(SegMateError, ValueError):
    """Input data is inconsistent (labels out of range, ragged slices, ...)."""


class FormatError(SegMateError, ValueError):
    """A binary file could not be parsed.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(FormatError):
    """A checkpoint does not match the architecture it is loaded into."""


class GenerationError(SegMateError, RuntimeError):
    """Phantom generation could not place all structures."""


class TrainingDiverged(SegMateError, RuntimeError):
    """The training loss became non-finite."""
