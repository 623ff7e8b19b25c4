"""Exception hierarchy shared by every module of the package."""


class DRankError(Exception):
    """Base class for all package errors."""


class DomainError(DRankError, ValueError):
    """An argument lies outside the domain of the operation."""


class QuadratureError(DRankError, ArithmeticError):
    """Numerical integration failed to reach the requested accuracy.

    ``estimate`` carries the best value obtained and ``error`` its
    estimated absolute error, so callers can decide what to do with it.
    """

    def __init__(self, message, estimate=float("nan"), error=float("inf")):
        super().__init__(message)
        self.estimate = estimate
        self.error = error


class DegenerateDensityError(DRankError, ArithmeticError):
    """The density is zero or numerically degenerate where it is needed."""


class DegenerateDesignError(DRankError, ValueError):
    """The regression design carries no information (e.g. zero score norm)."""


class InsufficientTableError(DRankError, ValueError):
    """A score table lacks the moments an operation needs."""


class ProvenanceError(DRankError, ValueError):
    """An estimate is combined with data or scores it was not fitted on."""


class RankDeficiencyError(DRankError, ValueError):
    """A linear system is singular; the message names the offending block."""


class PanelRefusedError(DRankError):
    """The panel test refuses to report a statistic (too many failed days)."""

    def __init__(self, message, days=()):
        super().__init__(message)
        self.days = tuple(days)


class ConvergenceWarning(UserWarning):
    """An iterative fit stopped before meeting its tolerance."""


class NumericalWarning(UserWarning):
    """A computed quantity was guarded (floored, flagged) for sanity."""
