"""Exception types shared across the package."""


class EbgError(Exception):
    """Base class for all package errors."""


class ParameterError(EbgError, ValueError):
    """A parameter is outside its allowed domain."""


class PreconditionError(EbgError, ValueError):
    """Input data violates an operation's precondition (e.g. unsorted timestamps)."""


class DegenerateDataError(EbgError, ValueError):
    """Data carries no usable information (zero normaliser, empty signal...)."""


class OutOfDomainError(EbgError, ValueError):
    """A formula is evaluated where it is not defined."""


class InconsistentInputsError(EbgError, ValueError):
    """Inputs are individually valid but jointly unphysical."""


class ConvergenceError(EbgError, RuntimeError):
    """A nonlinear fit failed to converge.

    The best attempt is attached as ``result`` for diagnostics.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result
