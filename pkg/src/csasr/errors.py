"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""


class NumericError(ArithmeticError):
    """An operation produced NaN or Inf from finite inputs."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (e.g. backward on a detached tensor)."""


class ConfigError(ValueError):
    """Inconsistent model, data, training or decoding configuration."""


class UsageError(ValueError):
    """An operation was called outside its contract."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss; the last good checkpoint is kept."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
