"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """Bad user input: violated precondition, mismatched grids, unknown ids."""


class NumericalFailure(RuntimeError):
    """A linear-algebra step failed (rank deficiency, non-finite values)."""

    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number


class CertificationFailure(RuntimeError):
    """A well-posedness constant could not be evaluated (overflow, bad profile)."""


class CertificateRejected(RuntimeError):
    """Strict-mode solve refused because the contraction certificate failed."""

    def __init__(self, message, certificate=None):
        super().__init__(message)
        self.certificate = certificate


class NonConvergence(RuntimeError):
    """Picard iteration exhausted its budget without meeting tolerance."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


class SolverDivergence(RuntimeError):
    """An inner fixed point failed to contract (step size too large)."""


class AnticipationRefused(InvalidArgument):
    """Raw (unconditioned) future dependence passed where the adaptedness
    wrapper is required."""
