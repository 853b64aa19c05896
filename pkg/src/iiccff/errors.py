"""Exception hierarchy shared by all modules.

Every error carries enough context to identify where it happened; the CLI
maps the three families below onto distinct exit codes.
"""


class IICCFFError(Exception):
    """Base class for all package errors."""


class InputError(IICCFFError, ValueError):
    """Invalid argument or malformed input data."""


class NumericalError(IICCFFError, ArithmeticError):
    """A numerical routine failed (no bracket, flat mode, non-finite values...)."""


class DegenerateDataError(IICCFFError):
    """Data carry no usable information for the requested quantity."""


class BracketError(NumericalError):
    """Root bracket does not contain a sign change."""


class FlatModeError(NumericalError):
    """Curvature at the mode is not negative, Laplace approximation impossible."""


class NonFiniteError(NumericalError):
    """Objective or integrand returned a non-finite value."""

    def __init__(self, message, location=None):
        super().__init__(message)
        self.location = location


class GridCoverageError(InputError):
    """Parameter grid does not span the region a constructor needs."""


class UndefinedEstimateError(DegenerateDataError):
    """An estimator is undefined for the supplied data."""
