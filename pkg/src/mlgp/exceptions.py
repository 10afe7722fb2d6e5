"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Array shapes do not conform, or a product dimension is too large."""


class NumericalError(ArithmeticError):
    """A factorization failed even after the maximum jitter was applied."""


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap.

    The last iterate is kept on ``last`` so callers can inspect it.
    """

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class OptimizationError(RuntimeError):
    """Marginal-likelihood optimization could not make progress.

    ``model`` holds the last model with a finite objective.
    """

    def __init__(self, message, model=None):
        super().__init__(message)
        self.model = model


class DegenerateSubspaceError(ValueError):
    """A basis needed for a subspace comparison is rank deficient or empty."""


class DataFormatError(ValueError):
    """An input file is malformed; the message names the offending row."""
