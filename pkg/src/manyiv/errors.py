"""Exception hierarchy shared by every module."""


class ManyIVError(Exception):
    """Base class for all package errors."""


class ParseError(ManyIVError):
    """Malformed CSV input."""

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class DimensionError(ManyIVError):
    pass


class RankError(ManyIVError):
    """Instrument matrix is numerically rank deficient."""

    def __init__(self, rank, expected):
        self.rank = rank
        self.expected = expected
        super().__init__(
            f"instrument matrix has numerical rank {rank}, expected {expected}"
        )


class DomainError(ManyIVError, ValueError):
    pass


class ConvergenceError(ManyIVError):
    def __init__(self, message, bracket=None):
        self.bracket = bracket
        if bracket is not None:
            message = f"{message} (bracket={bracket})"
        super().__init__(message)


class InfeasibleError(ManyIVError):
    pass


class DegenerateFitError(ManyIVError):
    pass


class UnsupportedError(ManyIVError):
    pass


class SingularityError(ManyIVError):
    pass


class ExperimentAborted(ManyIVError):
    """Raised when more than 1% of Monte Carlo replications fail."""
