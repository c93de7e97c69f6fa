"""Exception hierarchy shared across the package."""


class WindformerError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(WindformerError):
    """Tensor dimensions do not satisfy an operation's contract."""


class ConfigError(WindformerError):
    """A model/training configuration violates a constraint."""


class DataError(WindformerError):
    """Ingestion failed: malformed file, missing record, bad layout."""


class CheckpointError(WindformerError):
    """Checkpoint archive is malformed or does not match the model."""


class TrainingDiverged(WindformerError):
    """Loss became non-finite during training."""
