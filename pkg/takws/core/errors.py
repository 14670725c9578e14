"""
Exception hierarchy.

Every toolkit error carries the process exit code the CLI reports for
it: configuration problems exit with 2, data problems with 3 and
failures during computation with 4.
"""


class TakwsError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 4


class ConfigError(TakwsError):
    """Invalid configuration, spec or architecture mismatch."""

    exit_code = 2


class ShapeError(ConfigError):
    """Tensor dimensions disagree."""


class KeywordTextError(ConfigError):
    """Keyword text contains characters outside the alphabet."""

    def __init__(self, text: str, char: str):
        super().__init__(f"Keyword {text!r} contains unsupported character {char!r}")
        self.text = text
        self.char = char


class IncompatibleSnapshotError(ConfigError):
    """Snapshot or checkpoint taken on a different architecture."""


class DataError(TakwsError):
    """Dataset ingestion or sampling failure."""

    exit_code = 3


class UndefinedMetricError(DataError):
    """Metric is undefined for the given score set (e.g. a single class)."""


class AggregationError(DataError):
    """Reports cannot be averaged together."""


class PretrainingError(DataError):
    """Dataset cannot support joint pre-training."""


class TakwsRuntimeError(TakwsError):
    """Failure while computing."""

    exit_code = 4


class MissingConditioningError(TakwsRuntimeError):
    """A learnable activation is installed but no text embedding was given."""


class SnapshotCorruptionError(TakwsRuntimeError):
    """Snapshot checksum does not match its contents."""


class DivergenceError(TakwsRuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, lr: float, loss: float):
        super().__init__(f"Non-finite loss {loss} at epoch {epoch} (lr={lr:g})")
        self.epoch = epoch
        self.lr = lr
        self.loss = loss


class FrozenParameterError(TakwsRuntimeError):
    """Attempt to make a frozen module trainable."""
