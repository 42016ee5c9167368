"""Exception types shared across the engine."""


class TcbmError(Exception):
    """Base class for engine errors."""


class DomainError(TcbmError):
    """Invalid argument domain (negative Laplace argument, bad horizon, ...)."""


class GeometryError(TcbmError):
    """Contract geometry violated (spot outside the barrier corridor, ...)."""


class ConvergenceError(TcbmError):
    """A quadrature or series failed to stabilize within its budget.

    Carries the last two estimates so callers can inspect how far apart they were.
    """

    def __init__(self, message, last_estimates=None):
        super().__init__(message)
        self.last_estimates = last_estimates


class IntegrationError(TcbmError):
    """ODE integration failure (step-size underflow or solver breakdown)."""


class UnsupportedFamilyError(TcbmError):
    """Operation not defined for the given clock family."""


class DegenerateSystemError(TcbmError):
    """Linear system too ill-conditioned to trust (Pade fit degeneracy)."""


class NotComputableError(TcbmError):
    """Requested diagnostic needs data that was not retained."""


class ValidationError(TcbmError):
    """Config or dataset failed schema validation."""
