"""Exception hierarchy shared across the package."""


class MfcLabError(Exception):
    """Base class for all package errors."""


class AssumptionError(MfcLabError):
    """A sampled structural assumption (convexity, growth, consistency) failed."""


class SolverError(MfcLabError):
    """A PDE or particle sub-solver produced an invalid state."""


class ConvergenceError(MfcLabError):
    """An iterative solve did not reach its tolerance."""


class LegendreError(MfcLabError):
    """Numerical Legendre transform failed to converge."""


class MemoryBudgetError(MfcLabError):
    """A dense assembly or tensor grid would exceed the memory budget."""


class ConfigError(MfcLabError):
    """Malformed or inconsistent experiment configuration."""

    def __init__(self, message: str, lineno: int | None = None):
        super().__init__(message)
        self.lineno = lineno
