"""Exception types shared across the package."""


class E2BowsError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class DimensionError(E2BowsError, ValueError):
    pass


class NumericError(E2BowsError, ArithmeticError):
    pass


class FormatError(E2BowsError):
    """Malformed on-disk data. ``offset`` is the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
