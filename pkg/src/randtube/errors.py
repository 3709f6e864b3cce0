"""Exception hierarchy shared by all modules."""


class RandTubeError(Exception):
    """Base class for library errors."""


class ConfigError(RandTubeError, ValueError):
    """Invalid or inconsistent configuration."""


class DomainError(RandTubeError, ValueError):
    """A point lies outside the hold-all domain of a bounded model."""


class NumericalError(RandTubeError, ArithmeticError):
    """A numerical procedure failed (singular system, non-convergence, NaN)."""


class SampleRejected(NumericalError):
    """A sample violates a flow hypothesis and is excluded from statistics.

    Attributes
    ----------
    seed : int or None
        Seed of the offending sample.
    reason : str
        Short tag, ``"hold-all exit"`` or ``"degenerate jacobian"``.
    """

    def __init__(self, message, seed=None, reason=""):
        super().__init__(message)
        self.seed = seed
        self.reason = reason


class HoldAllExit(SampleRejected):
    """A trajectory left the hold-all domain B."""


class DegenerateFlow(SampleRejected):
    """The Jacobian determinant became non-positive."""
