"""Exception hierarchy shared by every module."""


class KspaceBoError(Exception):
    """Base class for all errors raised by this package."""


class InvalidParameterError(KspaceBoError, ValueError):
    """A scalar parameter is outside its admissible range."""


class InvalidInputError(KspaceBoError, ValueError):
    """An array argument has the wrong shape, length or content."""


class DegenerateFamilyError(KspaceBoError):
    """The generator family does not span enough dimensions for the basis."""

    def __init__(self, rank, required):
        self.rank = rank
        self.required = required
        super().__init__(
            f"generator family has numerical rank {rank}, need at least {required}"
        )


class ConvergenceError(KspaceBoError):
    """An iterative solver exhausted its budget.

    ``residual`` carries the last measured residual or worst violation.
    """

    def __init__(self, message, residual):
        self.residual = float(residual)
        super().__init__(f"{message} (residual={self.residual:.3e})")


class FactorizationError(KspaceBoError):
    """Cholesky factorization failed even after jitter escalation."""
