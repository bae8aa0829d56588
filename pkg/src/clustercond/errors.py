"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ``ParameterError`` -> 1,
``DataError`` -> 2, ``NumericalError`` -> 3.
"""


class ClusterCondError(Exception):
    """Base class for all package errors."""


class ParameterError(ClusterCondError, ValueError):
    """Invalid argument or configuration value."""


class DataError(ClusterCondError):
    """Malformed, inconsistent or non-finite input data."""


class NumericalError(ClusterCondError, ArithmeticError):
    """Divergence, non-finite gradients or invalid numerical state."""
