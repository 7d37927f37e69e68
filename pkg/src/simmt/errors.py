"""Exception hierarchy shared across the package.

Each class maps to one CLI exit code (see ``simmt.cli``).
"""


class SimmtError(Exception):
    """Base class for all package errors."""


class ConfigError(SimmtError, ValueError):
    """Invalid or inconsistent configuration."""


class ContractError(SimmtError, ValueError):
    """A function was called outside its documented preconditions."""


class DimensionError(ContractError):
    """Tensor shapes do not agree."""


class DataError(SimmtError, ValueError):
    """Malformed corpus, feature, annotation or token data."""


class NumericalError(SimmtError, FloatingPointError):
    """NaN/Inf encountered, or a masked softmax row with nothing to attend to."""
