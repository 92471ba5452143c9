"""Exception types raised across the toolkit."""


class HeatDFCError(Exception):
    """Base class for all toolkit errors."""


class DegenerateSignal(HeatDFCError, ValueError):
    """A signal column is constant and cannot be rescaled."""


class RankDeficient(HeatDFCError, ValueError):
    """The cosine design matrix is numerically singular."""


class ZeroVariance(HeatDFCError, ValueError):
    """A (local) variance fell below the numerical guard.

    Attributes
    ----------
    where : object
        Time point, edge or step at which the variance vanished.
    """

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class AsymmetricInput(HeatDFCError, ValueError):
    pass


class EmptyInput(HeatDFCError, ValueError):
    pass


class LabelOutOfRange(HeatDFCError, ValueError):
    pass


class EmptyState(HeatDFCError, ValueError):
    pass


class StateNotVisited(HeatDFCError, ValueError):
    pass


class InsufficientPairs(HeatDFCError, ValueError):
    pass


class NotPSD(HeatDFCError, ValueError):
    pass


class ConfigError(HeatDFCError, ValueError):
    """Run configuration or manifest failed validation."""


class IncompleteRun(HeatDFCError, RuntimeError):
    pass


class StageError(HeatDFCError, RuntimeError):
    """Wraps a failure inside a pipeline stage with the stage name attached."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
