"""Exception types raised across the package."""


class SmpcError(Exception):
    """Base class for all domain errors."""


class SingularMatrix(SmpcError):
    pass


class NotPositiveDefinite(SmpcError):
    pass


class NonConvergence(SmpcError):
    pass


class DimensionOverflow(SmpcError):
    pass


class DimensionMismatch(SmpcError, ValueError):
    pass


class LyapunovFailure(SmpcError):
    pass


class RiccatiNonConvergence(NonConvergence):
    pass


class MissingPreviousSolution(SmpcError):
    pass


class Infeasible(SmpcError):
    """The constraint cannot be met at the given budget.

    ``min_value`` is the smallest achievable constraint value, i.e. the
    smallest budget for which the problem would be feasible.
    """

    def __init__(self, message, min_value=None):
        super().__init__(message)
        self.min_value = min_value


class SolverFailure(SmpcError):
    """Wraps a solver error together with the state needed to reproduce it."""

    def __init__(self, message, context=None):
        super().__init__(message)
        self.context = context or {}
