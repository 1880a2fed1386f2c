"""Exception taxonomy shared across the package.

Every error raised by the library derives from :class:`HeatcoeffError` so that
callers (and the CLI) can distinguish library failures from programming bugs.
Validation problems map to CLI exit code 2, numerical failures to exit code 3.
"""


class HeatcoeffError(Exception):
    """Base class for all library errors."""


class DomainError(HeatcoeffError, ValueError):
    """Mathematically invalid input: non-positive spectrum, bad exponent, shape
    mismatch, a matrix that fails a required structural property, and so on."""


class ValidationError(HeatcoeffError, ValueError):
    """Configuration or schema violation.  Raised during ingestion so that bad
    configs never reach numeric code."""


class ConfluenceError(HeatcoeffError):
    """Eigenvalue arguments closer than the gap-policy threshold while the
    policy is 'strict' (no extended-precision fallback requested)."""


class EvaluationError(HeatcoeffError):
    """A user-supplied spectral function returned a non-finite value; the
    message names the offending argument tuple."""


class ConvergenceError(HeatcoeffError):
    """A series was evaluated outside its region of convergence."""


class QuadratureError(HeatcoeffError):
    """Adaptive quadrature exhausted its refinement budget.

    Carries the best value obtained and the achieved relative error estimate so
    a caller can decide whether the partial result is still useful.
    """

    def __init__(self, message, value=None, achieved_rel_error=None):
        super().__init__(message)
        self.value = value
        self.achieved_rel_error = achieved_rel_error


class FitError(HeatcoeffError):
    """Least-squares fit rejected (ill-conditioned design matrix)."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition
