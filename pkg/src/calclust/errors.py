"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class DegenerateInputError(InvalidInputError):
    """Raised when the data carry no usable structure (e.g. all rows identical)."""


class UndefinedMetricError(ValueError):
    """Raised when a metric is undefined for the given input (e.g. one class only)."""


class FormatError(ValueError):
    """Raised when a binary file is malformed. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
