"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data and format
problems exit 2, numeric failures exit 3.
"""


class WearfmError(Exception):
    """Base class for package errors."""


class DimensionError(WearfmError, ValueError):
    """Array shapes do not agree with the operation's contract."""


class ValidationError(WearfmError, ValueError):
    """Input violates a documented precondition."""


class DegeneracyError(WearfmError, ValueError):
    """Input is degenerate (e.g. all clustering points identical)."""


class NumericError(WearfmError, ArithmeticError):
    """A computation produced non-finite or otherwise unusable values."""


class StateError(WearfmError, RuntimeError):
    """Operation called in a state that does not support it."""


class FormatError(WearfmError, ValueError):
    """A serialized file is corrupt or truncated."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(FormatError):
    """A serialized file has an unsupported format version."""


class NotFoundError(WearfmError, KeyError):
    """A requested item does not exist in the catalog."""

    def __str__(self) -> str:  # KeyError quotes its message; keep it plain
        return self.args[0] if self.args else ""
