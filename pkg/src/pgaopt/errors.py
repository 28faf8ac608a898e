"""Exception types raised across the package."""


class ContractViolation(ValueError):
    """An argument broke a documented precondition (shape, sign, range)."""


class NumericalFailure(ArithmeticError):
    """A non-finite value showed up during evaluation.

    ``iterate`` holds the point at which it happened, when known.
    """

    def __init__(self, message, iterate=None):
        super().__init__(message)
        self.iterate = iterate


class InsufficientHistory(ValueError):
    """The pipe history does not reach back far enough to fill the pipe."""


class InvalidTemperature(ValueError):
    pass


class DataFormatError(ValueError):
    pass


class InfeasibleSampler(RuntimeError):
    """Feasible-initialisation sampling gave up after its retry cap."""


class ConfigError(ValueError):
    pass
