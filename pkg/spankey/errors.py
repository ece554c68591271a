"""
errors.py - exceptions raised across the spankey lab.

Every failure the lab reports on purpose derives from SpanKeyError.
Argument problems also derive from ValueError.
"""


class SpanKeyError(Exception):
    """Base class for all lab errors."""


class ShapeMismatchError(SpanKeyError, ValueError):
    """Array shapes disagree (key vs site width, stale trace, layer dims)."""


class SiteIndexError(SpanKeyError, ValueError):
    """An injection site is outside the network's hidden layers."""


class ConfigError(SpanKeyError, ValueError):
    """A configuration value failed validation."""


class NonFiniteError(SpanKeyError, ValueError):
    """A gradient, parameter or loss became NaN or infinite."""


class IdxFormatError(SpanKeyError, ValueError):
    """An IDX byte stream is malformed."""


class HeadKindError(SpanKeyError, ValueError):
    """The requested objective needs an output head the network lacks."""


class InvalidDistributionError(SpanKeyError, ValueError):
    """A vector is not a point on the probability simplex."""


class ZeroKeyError(SpanKeyError, ValueError):
    """Energy split requested for the zero vector."""


class RankDeficiencyError(SpanKeyError):
    """Basis construction kept producing dependent rows."""


class BudgetError(SpanKeyError, ValueError):
    """An attack budget is empty or was overrun."""


class TrainingDivergedError(NonFiniteError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, step: int, loss: float):
        self.epoch = epoch
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, step {step}")
