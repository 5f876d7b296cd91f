"""Exception hierarchy.

The CLI maps these onto exit codes: ``DataError`` -> 2, ``FitError`` -> 3,
``PreconditionError`` -> 4.
"""


class MPMError(Exception):
    """Base class for all toolkit errors."""


class DataError(MPMError, ValueError):
    """Malformed or inconsistent input data, files or documents."""


class PreconditionError(MPMError, ValueError):
    """Inputs are well formed but the requested computation is refused."""


class FitError(MPMError, RuntimeError):
    """A maximum likelihood fit failed."""


class ConvergenceError(FitError):
    def __init__(self, message: str, gradient_norm: float = float("nan")):
        super().__init__(message)
        self.gradient_norm = gradient_norm


class SeparationError(FitError):
    """(Quasi-)complete separation: the likelihood has no finite maximum."""


class RankDeficientError(FitError):
    """Design matrix columns are exactly (or numerically) collinear."""
