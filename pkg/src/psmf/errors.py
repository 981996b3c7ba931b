"""Exception types shared across the filtering stack.

Contract violations (bad shapes, empty observations, malformed inputs) raise
ContractError subclasses. Numerical failures discovered at run time (singular
systems, non-finite values, discretization breakdown) raise NumericalError
subclasses so callers can distinguish "you called it wrong" from "the numbers
went bad".
"""

from __future__ import annotations


class ContractError(ValueError):
    """An input violates a documented precondition."""


class EmptyObservationError(ContractError):
    """A step with zero observed entries reached an operation that needs data."""


class ParseError(ContractError):
    """A data file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(ContractError):
    """A run configuration field is missing or malformed; names the field."""

    def __init__(self, field: str, message: str):
        super().__init__(f"config field '{field}': {message}")
        self.field = field


class NumericalError(ArithmeticError):
    """Base class for runtime numerical failures."""


class SingularMatrixError(NumericalError):
    """A linear system was singular or too ill-conditioned to solve."""

    def __init__(self, message: str, cond: float | None = None):
        if cond is not None:
            message = f"{message} (condition estimate {cond:.3e})"
        super().__init__(message)
        self.cond = cond


class DivergenceError(NumericalError):
    """A quantity that must stay finite became NaN or infinite."""


class DiscretizationError(NumericalError):
    """A discretized process-noise covariance failed its definiteness check."""
