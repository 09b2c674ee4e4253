"""Exception hierarchy shared across the package."""


class FlowFoldError(Exception):
    """Base class for all package errors."""


class ShapeError(FlowFoldError, ValueError):
    pass


class StateError(FlowFoldError, RuntimeError):
    pass


class ConfigError(FlowFoldError, ValueError):
    pass


class ModeError(FlowFoldError, ValueError):
    """Conditional/unconditional mismatch between a model and its caller."""


class DegenerateFeatureError(FlowFoldError, ValueError):
    def __init__(self, feature: int, message: str | None = None):
        self.feature = feature
        super().__init__(message or f"feature {feature} has zero variance")


class DegenerateSupportError(FlowFoldError, ValueError):
    """Truth sample has min == max, so histogram bins cannot be bound."""


class KinematicsError(FlowFoldError, ValueError):
    pass


class EventValidationError(FlowFoldError, ValueError):
    pass


class EventFileError(FlowFoldError, ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class CheckpointError(FlowFoldError, ValueError):
    def __init__(self, message: str, field: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class NonConvergenceError(FlowFoldError, RuntimeError):
    def __init__(self, message: str, t: float, state):
        self.t = t
        self.state = state
        super().__init__(message)


class DivergenceError(FlowFoldError, FloatingPointError):
    pass


class TrainingDivergedError(FlowFoldError, FloatingPointError):
    def __init__(self, epoch: int, batch: int, value: float):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
