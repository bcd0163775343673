"""Exception types raised across the package."""


class SpecLabError(Exception):
    """Base class for every error raised by speclab."""


class MissingContext(SpecLabError, KeyError):
    """A decoding context has no row in the model table."""

    def __str__(self):
        return Exception.__str__(self)


class ModelFormatError(SpecLabError, ValueError):
    """A model file or table violates the tabular model contract."""


class BudgetExceeded(SpecLabError, ValueError):
    """An exhaustive enumeration would exceed its state budget."""


class ZeroResidual(SpecLabError, ArithmeticError):
    """The residual max(0, p - q) has no mass; reaching this is a logic bug."""


class AllRejected(SpecLabError, ArithmeticError):
    """Every beam score is zero, so no layer distribution can be formed."""


class DegenerateFit(SpecLabError, ValueError):
    """Least-squares calibration has no unique solution."""


class ConfigError(SpecLabError, ValueError):
    """An experiment config is malformed or inconsistent."""
