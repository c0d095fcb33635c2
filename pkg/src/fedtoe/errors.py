"""Exception types shared across the package."""


class FedToeError(Exception):
    """Base class for all package errors."""


class RangeViolationError(FedToeError, ValueError):
    """A value lies outside the quantization range of its group."""


class ParameterError(FedToeError, ValueError):
    """An argument is outside its admissible domain."""


class PreconditionError(FedToeError, ValueError):
    """A link budget or schedule does not satisfy an operation's preconditions."""


class InfeasibleError(FedToeError):
    """The allocation problem has no feasible point.

    ``shortfall`` carries the amount (Hz) by which the minimum bandwidth
    demand exceeds the budget, when that is meaningful.
    """

    def __init__(self, message, shortfall=None):
        super().__init__(message)
        self.shortfall = shortfall


class RetransmissionCapError(FedToeError):
    """Every selected client kept failing until the retransmission cap."""
