"""Exception types shared across the package."""


class RidepoolError(Exception):
    """Base class for all package errors."""


class InvalidInputError(RidepoolError, ValueError):
    pass


class InvalidCarError(InvalidInputError):
    """A car violates a structural or timing precondition."""


class ConfigError(RidepoolError, ValueError):
    pass


class FormatError(RidepoolError, ValueError):
    """An input file does not follow its expected layout."""


class InvalidComparisonError(RidepoolError, ValueError):
    pass


class NumericOverflowError(RidepoolError, ArithmeticError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class SimulationError(RidepoolError, RuntimeError):
    """An internal invariant broke during a run."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step
