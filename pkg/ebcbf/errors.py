"""Exceptions raised by ebcbf

Each exception class carries the process exit code the command line
reports for it.
"""


class EBCBFError(Exception):
    """Base class for all errors raised by ebcbf"""

    exit_code = 1


class InputError(EBCBFError, ValueError):
    """Raised when arguments violate a documented precondition"""

    exit_code = 1


class ConfigError(InputError):
    """Raised when a configuration cannot produce a valid run"""


class StateError(InputError):
    """Raised when a model is queried before it has been fitted"""


class NumericalError(EBCBFError, ArithmeticError):
    """Raised when a factorization or evaluation fails numerically"""

    exit_code = 2


class InitializationError(NumericalError):
    """Raised when the training objective is not finite at its starting point"""


class InfeasibilityError(EBCBFError):
    """Raised when the safety filter has no admissible input"""

    exit_code = 3


class DegeneracyError(InfeasibilityError):
    """Raised when an active barrier constraint cannot be acted upon

    This happens where the barrier gradient is orthogonal to every input
    direction, i.e. [h, h]_{gg^T}(x) vanishes.
    """

    def __init__(self, message, t=None):
        if t is not None:
            message = f"{message} (t={t:.6g}s)"
        super().__init__(message)
        self.t = t
