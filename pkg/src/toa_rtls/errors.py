"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class SingularityError(ArithmeticError):
    """Raised when a factorization or derivative is undefined at the input."""


class NumericalFailureError(ArithmeticError):
    """Raised when a recursion step cannot be completed.

    ``diagnostics`` carries whatever the failing step knew (time index, block
    size, the offending matrix norm) so callers can log it.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
