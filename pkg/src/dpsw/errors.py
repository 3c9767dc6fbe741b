"""Exception hierarchy shared by all modules."""


class DPSWError(Exception):
    """Base class for errors raised by this package."""


class InvalidInputError(DPSWError, ValueError):
    """Input data violates an operation's preconditions (e.g. non-finite)."""


class InvalidParameterError(DPSWError, ValueError):
    """A scalar parameter is out of range."""


class DomainError(DPSWError, ValueError):
    """Argument outside the support of a distribution function."""


class DegenerateFitError(DPSWError, ArithmeticError):
    """The PWM fit has no usable tail (zero spread, empty tail, sigma <= 0)."""


class PositivityError(DPSWError, ValueError):
    """A propensity is not strictly inside (0, 1)."""


class EmptyGroupError(DPSWError, ValueError):
    """A treatment group needed by the computation has no members."""


class ShapeError(DPSWError, ValueError):
    """Array dimensions are incompatible."""


class ConfigurationError(DPSWError, ValueError):
    """Unknown scheme/mode or missing configuration value."""


class DataError(DPSWError, ValueError):
    """Malformed dataset or CSV file."""


class NumericalAbort(DPSWError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


class UnsupportedPrimitiveError(DPSWError, TypeError):
    """An operation outside the autodiff primitive set was applied to a Tensor."""
