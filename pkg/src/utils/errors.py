"""Exception hierarchy shared by all simulator modules."""

from typing import Optional


class SimulationError(Exception):
    """Base class for simulator errors."""


class InvalidArgumentError(SimulationError, ValueError):
    """An argument violates an operation's precondition."""


class NumericalFailureError(SimulationError, ArithmeticError):
    """A numerical routine failed (indefinite matrix, stalled solver, ...).

    Attributes:
        step: Time-step index at which the failure happened, when known
    """

    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)


class ConfigError(SimulationError, ValueError):
    """A run configuration is invalid."""
