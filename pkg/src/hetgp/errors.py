"""Exception types shared across the package.

The split matters to the CLI: validation-style errors (bad shapes, bad
files, bad expressions) map to exit code 2, everything else to 1.
"""

from __future__ import annotations


class HetgpError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(HetgpError, ValueError):
    """Array arguments have incompatible shapes or lengths."""


class DataError(HetgpError, ValueError):
    """A dataset, CSV file, or feature specification is invalid.

    ``row`` carries the offending 1-based data row when known.
    """

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


class ExpressionError(HetgpError, ValueError):
    """A closed-form expression string does not fit the grammar."""


class FormatError(HetgpError, ValueError):
    """A serialized artifact has an unknown layout or version."""


class NotPositiveDefiniteError(HetgpError, RuntimeError):
    """Cholesky factorization failed even at the jitter cap.

    ``jitter`` records the largest jitter that was attempted.
    """

    def __init__(self, message: str, jitter: float):
        super().__init__(message)
        self.jitter = jitter
