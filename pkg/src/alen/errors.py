"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigurationError(ValueError):
    """A hyperparameter or layer configuration is invalid."""


class UsageError(RuntimeError):
    """An API was called in an unsupported way (e.g. backward twice)."""


class DataError(ValueError):
    """A data file is malformed or its metadata is out of range."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/Inf loss; carries the offending position."""

    def __init__(self, epoch: int, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step
        self.value = value
