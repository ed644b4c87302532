"""Exception types shared across the package."""


class DamaError(Exception):
    """Base class for all package errors."""


class ConfigError(DamaError, ValueError):
    """Invalid or inconsistent configuration."""


class ShapeError(DamaError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(DamaError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(DamaError, ArithmeticError):
    """A non-finite value appeared during training."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class FormatError(DamaError, ValueError):
    """A binary container could not be parsed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
