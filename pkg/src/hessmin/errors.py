"""Exception types shared across the package."""


class HessminError(Exception):
    """Base class for all package errors."""


class InputError(HessminError, ValueError):
    """An argument violates a documented precondition."""


class DomainError(HessminError, ValueError):
    """Evaluation requested outside the mathematical domain of an operation."""


class SingularityError(HessminError, ValueError):
    """Derivative requested at a declared non-differentiable point."""


class InternalError(HessminError, RuntimeError):
    """An internal invariant failed (e.g. a stencil read an exterior node)."""


class SolverFailure(HessminError, RuntimeError):
    """The minimizer diverged or could not make progress.

    Carries the energy history accumulated up to the failure.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class NumericFailure(SolverFailure):
    """NaN or overflow encountered during iteration."""


class ConfigError(HessminError, ValueError):
    """A run configuration failed validation."""
