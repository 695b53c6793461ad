"""Shared exception types for the kgfl package."""


class KgflError(Exception):
    """Base class for package-specific failures."""


class DomainError(KgflError):
    """A map was evaluated outside the region where it returns finite values."""


class DivergenceError(KgflError):
    """A simulation left the admissible region.

    Carries the partial trajectory collected so far in ``partial`` when one
    is available.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class SingularControlError(KgflError):
    """The learned control map is not invertible at the current state."""

    def __init__(self, message, x=None):
        super().__init__(message)
        self.x = x


class FitDivergenceError(KgflError):
    """An iterative fit diverged even after step-size reduction.

    ``trace`` holds the cost history up to the failure.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class TrajectoryParseError(KgflError):
    """A trajectory CSV could not be parsed; ``line`` is 1-based."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class RankDeficiencyWarning(UserWarning):
    """A least-squares regressor was rank deficient; minimum-norm solution returned."""


class NoiseAmplificationWarning(UserWarning):
    """Nested numerical differentiation lost too much precision to be trusted."""
