"""Exception hierarchy shared by every module."""


class PCLError(Exception):
    """Base class for all package errors."""


class ConfigError(PCLError, ValueError):
    """Invalid configuration or contract violation at the API boundary."""


class DimensionError(PCLError, ValueError):
    """Tensor or grid shapes are incompatible."""


class DomainError(PCLError, ValueError):
    """A value lies outside the domain of an operation (log of <= 0, div by 0, ...)."""


class NumericAbort(PCLError, ArithmeticError):
    """Training hit a non-finite value and cannot continue."""

    def __init__(self, message, step=None, name=None):
        super().__init__(message)
        self.step = step
        self.name = name
