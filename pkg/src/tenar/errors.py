"""Exception hierarchy.

Validation problems (bad shapes, malformed files, infeasible settings) and
numerical failures (singular systems, divergence, non-convergence) are kept
apart because the command line maps them to different exit codes.
"""

from __future__ import annotations


class TenarError(Exception):
    """Base class for all package errors."""


class ValidationError(TenarError, ValueError):
    """Input does not satisfy a documented precondition."""


class NumericalError(TenarError, ArithmeticError):
    """A numerical routine failed (singular matrix, divergence, ...)."""


class SingularMatrixError(NumericalError):
    pass


class DivergenceError(NumericalError):
    """An alternating update moved the objective in the wrong direction."""

    def __init__(self, message: str, trace: list[float] | None = None):
        super().__init__(message)
        self.trace = list(trace or [])


class ConvergenceError(NumericalError):
    """Iterative routine ran out of iterations; ``estimate`` is the best value found."""

    def __init__(self, message: str, estimate: float | None = None):
        super().__init__(message)
        self.estimate = estimate
