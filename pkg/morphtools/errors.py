class MorphbenchError(Exception):
    """Base error; `exit_code` is what the CLI returns for it."""

    exit_code = 4


class ConfigError(MorphbenchError, ValueError):
    exit_code = 2


class ModelError(MorphbenchError):
    exit_code = 3


class ModelContractError(ModelError):
    """A model produced or received a tensor of the wrong shape."""


class WeightFileError(ModelError):
    pass


class BadMagicError(WeightFileError):
    pass


class ContainerVersionError(WeightFileError):
    pass


class ShapeMismatchError(WeightFileError):
    pass


class TruncatedPayloadError(WeightFileError):
    pass


class DataError(MorphbenchError, ValueError):
    """Unreadable inputs or violated metric preconditions."""

    exit_code = 3


class OptimizationError(MorphbenchError):
    """Raised when the morph optimisation cannot continue.

    Carries the iteration index at which it stopped and the trace recorded so far.
    """

    exit_code = 4

    def __init__(self, message, iteration=None, trace=None):
        super().__init__(message)
        self.iteration = iteration
        self.trace = trace


class TensorShapeError(ValueError):
    pass
