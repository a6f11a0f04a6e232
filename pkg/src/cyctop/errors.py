class CycTopError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(CycTopError, ValueError):
    """Input data or configuration failed validation."""


class TopologyError(CycTopError):
    """A cycle decomposition turned out inconsistent."""


class ConvergenceError(CycTopError, ArithmeticError):
    """An eigensolver failed to reach the required accuracy."""
