"""Exception types shared across the package."""


class MtlbError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(MtlbError, ValueError):
    pass


class NumericalFailure(MtlbError, ArithmeticError):
    pass


class ConstraintViolation(MtlbError, ValueError):
    """An action falls outside the offered action set."""

    def __init__(self, message, task=None):
        super().__init__(message)
        self.task = task


class FormatError(MtlbError, ValueError):
    pass


class UnsupportedError(MtlbError, NotImplementedError):
    pass
