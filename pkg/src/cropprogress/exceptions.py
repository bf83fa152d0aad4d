"""Exception types shared across the package."""


class DataError(ValueError):
    """Raised when input data violate a schema or a declared invariant."""


class FitError(RuntimeError):
    """Raised when an optimizer fails to converge or diverges.

    Carries the best parameter vector seen and a short iteration trace so
    callers can diagnose the failure.
    """

    def __init__(self, message, best_params=None, trace=None):
        super().__init__(message)
        self.best_params = best_params
        self.trace = trace or []
