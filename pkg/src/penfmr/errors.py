"""Exception types shared across the package."""


class PenfmrError(Exception):
    """Base class for all package errors."""


class DataError(PenfmrError):
    """Invalid input data (maps to CLI exit code 2)."""


class ConstantColumnError(DataError):
    def __init__(self, column):
        self.column = column
        super().__init__(f"column {column!r} is constant and cannot be standardized")


class DimensionMismatchError(DataError):
    pass


class InvalidResponseError(DataError):
    pass


class NumericalError(PenfmrError):
    """Numerical failure during fitting (maps to CLI exit code 3)."""


class SingularSystemError(NumericalError):
    pass


class AllStartsFailedError(NumericalError):
    pass


class EmptySetError(PenfmrError):
    pass


class IsolatedSpeciesWarning(UserWarning):
    """A species column is all-absent or all-present; its intercept is clamped."""
