"""Exception hierarchy shared across the package."""


class RoieNetError(Exception):
    """Base class for all package errors."""


class ShapeError(RoieNetError):
    """Tensor shapes incompatible with an operation's contract."""


class ConfigError(RoieNetError):
    """Invalid configuration value or combination."""


class ContractError(RoieNetError):
    """An API precondition was violated by the caller."""


class IngestionError(RoieNetError):
    """Dataset files missing, unreadable, or inconsistent."""


class CheckpointError(RoieNetError):
    """Checkpoint files unreadable or inconsistent with the requested model."""


class NonFiniteLossError(RoieNetError):
    """Training produced a NaN or Inf loss; carries the offending epoch/batch."""

    def __init__(self, epoch: int, batch_index: int, value: float):
        self.epoch = epoch
        self.batch_index = batch_index
        self.value = value
        super().__init__(
            f"non-finite loss {value!r} at epoch {epoch}, batch {batch_index}"
        )
