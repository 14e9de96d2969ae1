"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ``DataError`` subclasses exit with 2,
``NumericError`` with 3.
"""


class SongConvError(Exception):
    """Base class for all package errors."""


class DataError(SongConvError):
    """Bad or unusable input data."""


class NumericError(SongConvError):
    """A non-finite value appeared in a computation."""


class ShapeMismatch(DataError, ValueError):
    pass


class ClipTooShort(DataError):
    pass


class EmptyDataset(DataError):
    pass


class IoFailure(DataError, OSError):
    pass
