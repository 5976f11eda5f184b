"""Exception types shared across the engine.

The CLI maps these onto exit codes (see ``policy_its.cli``).
"""


class PolicyITSError(Exception):
    """Base class for engine errors."""


class ValidationError(PolicyITSError, ValueError):
    """Input data or configuration failed validation."""


class NonFiniteError(PolicyITSError, FloatingPointError):
    """A log-posterior term evaluated to a non-finite value."""

    def __init__(self, term, value):
        super().__init__(f"non-finite log-posterior term {term!r}: {value}")
        self.term = term
        self.value = value


class ConvergenceError(PolicyITSError, RuntimeError):
    """An optimizer failed to converge; ``trace`` holds its iteration log."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class IndefiniteHessianError(ConvergenceError):
    """The negative Hessian at a reported mode is not positive definite."""


class OracleDisagreement(PolicyITSError):
    """Laplace and MCMC summaries disagree, or the MCMC run is not trustworthy."""
