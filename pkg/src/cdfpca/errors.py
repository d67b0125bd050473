"""Exception hierarchy.

Errors are split into two families so the CLI can map them to exit codes:
validation problems (bad input data, violated preconditions) and numerical
problems (estimation failures that survive all fallbacks).
"""


class CdfpcaError(Exception):
    """Base class for all package errors."""


class ValidationError(CdfpcaError):
    """Invalid input data or violated operation precondition."""


class ParseError(ValidationError):
    """Malformed tabular input; carries the offending row number."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class CovariateUnavailableError(ValidationError):
    """Day has no temperature observations, so no covariate can be derived."""


class EmptyPhaseError(ValidationError):
    """A phase split produced an empty phase."""


class InsufficientDataError(ValidationError):
    """Not enough data to fit the requested model."""


class NumericalError(CdfpcaError):
    """An estimation step failed numerically after exhausting fallbacks."""


class WindowEmptyError(NumericalError):
    """Kernel window around a target stayed unusable after bandwidth escalation."""


class DegenerateCovarianceError(NumericalError):
    """Covariance surface carries no variance to decompose."""
