"""Exception hierarchy shared by every module of the package."""


class NestedViTError(Exception):
    """Base class for all package errors."""


class ShapeError(NestedViTError, ValueError):
    """Operand extents are incompatible."""


class ConfigError(NestedViTError, ValueError):
    """A configuration value is invalid or inconsistent."""


class InputError(NestedViTError, ValueError):
    """Input data does not satisfy an operation's preconditions."""


class FormatError(InputError):
    """A binary file is malformed.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UsageError(NestedViTError, RuntimeError):
    """An API was called in a state where it cannot work."""


class CorruptionError(NestedViTError):
    """A checkpoint manifest disagrees with its blob."""


class ThresholdLookupError(NestedViTError, KeyError):
    """A threshold was requested that a report does not contain."""


class NonFiniteLossError(NestedViTError, FloatingPointError):
    def __init__(self, stage, batch_index, value):
        super().__init__(
            f"non-finite loss {value!r} at stage {stage} (batch {batch_index})"
        )
        self.stage = stage
        self.batch_index = batch_index
        self.value = value
