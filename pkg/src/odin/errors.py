"""Exception hierarchy shared across the package."""


class OdinError(Exception):
    """Base class for all package errors."""


class DomainError(OdinError, ValueError):
    """Input outside the domain of a function (non-finite value, pole)."""


class InvalidGridError(OdinError, ValueError):
    """Time grid is not strictly increasing or too short."""


class NumericalError(OdinError, ArithmeticError):
    """Factorization failed even after jitter escalation."""


class IntegrationError(OdinError, RuntimeError):
    """ODE integration stopped before reaching the final output time."""

    def __init__(self, message, last_time=None):
        super().__init__(message)
        self.last_time = last_time


class FittingError(OdinError, RuntimeError):
    """Hyperparameter fitting failed on every restart.

    ``best`` carries the best-effort hyperparameters, if any were found.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best
