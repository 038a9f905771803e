"""Exception hierarchy shared by all modules."""


class SdeLabError(Exception):
    """Base class for every error raised by the package."""


class DomainError(SdeLabError, ValueError):
    """A numeric argument lies outside its admissible range."""


class ShapeError(SdeLabError, ValueError):
    """Objects built on different grids were combined."""


class DriftEvaluationError(SdeLabError, ArithmeticError):
    """A drift returned a non-finite value.

    The offending time and state are kept on the exception.
    """

    def __init__(self, message, t=None, y=None):
        super().__init__(message)
        self.t = t
        self.y = y


class GuardError(SdeLabError, ValueError):
    """A score was requested too close to the terminal time."""


class ConditioningError(SdeLabError, ArithmeticError):
    """A self-normalized estimator lost all of its mass."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class ValidationError(SdeLabError, ValueError):
    """Invalid configuration or malformed input object."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class DimensionError(SdeLabError, ValueError):
    """A dense finite-difference computation would be too large."""


class DivergenceError(SdeLabError, RuntimeError):
    """An optimizer left its admissible region."""
