"""Exception types raised across the package."""


class AltGradError(Exception):
    """Base class for all package errors."""


class DimensionError(AltGradError, ValueError):
    pass


class ParameterError(AltGradError, ValueError):
    pass


class CapacityError(AltGradError):
    """A requested feature rank exceeds the configured cap."""


class DegeneracyError(AltGradError, ArithmeticError):
    """An approximate normaliser came out nonpositive."""


class RangeError(AltGradError, OverflowError):
    pass


class NumericalDomainError(AltGradError, ArithmeticError):
    pass
