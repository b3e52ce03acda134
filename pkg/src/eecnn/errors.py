"""Exception types shared across the package."""

from __future__ import annotations


class ParameterError(ValueError):
    """Shapes or layer parameters do not fit together."""


class UsageError(RuntimeError):
    """An operation was called in a state that does not allow it."""


class FormatError(ValueError):
    """A binary file could not be parsed.

    Attributes:
        offset: byte offset at which parsing failed, if known.
        index: record index at which parsing failed, if known.
    """

    def __init__(self, message: str, offset: int | None = None, index: int | None = None):
        where = []
        if index is not None:
            where.append(f"record {index}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.offset = offset
        self.index = index
