"""Exception types shared across the package."""

from __future__ import annotations


class SegmergeError(ValueError):
    """Base class for data errors: bad input files, unresolved references,
    inconsistent rasters. The CLI maps these to exit code 1."""


class ParseError(SegmergeError):
    """Syntax or reference error in a line-oriented input file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
