"""Exception types shared across the package."""


class CbeditError(Exception):
    """Base class for all package-specific failures."""


class DimensionError(CbeditError, ValueError):
    """Array shapes or index sets are inconsistent with the model/dataset."""


class ConfigError(CbeditError, ValueError):
    """Invalid configuration value (CLI exit code 2)."""


class NumericalError(CbeditError, RuntimeError):
    """Numerical failure (CLI exit code 3)."""


class NotPositiveDefiniteError(NumericalError):
    """Damped curvature failed its positive-definite factorization.

    Raise the damping or switch the backend to gauss-newton mode.
    """


class StaleOperatorError(NumericalError):
    """A curvature operator was used after its model's parameters changed."""


class DivergenceError(NumericalError):
    """Training produced a non-finite loss (step size too large)."""


class UnsupportedModelError(CbeditError, ValueError):
    """Operation requires a model class this build does not cover."""
