"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ArgumentError(ValueError):
    """An argument violates an operation's precondition."""


class ConfigurationError(ValueError):
    """A configuration value is invalid."""


class FeatureFormatError(ValueError):
    """A feature file is malformed.

    ``offset`` is the byte offset at which parsing failed.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointError(RuntimeError):
    """A checkpoint is missing or unreadable."""


class TrainingDivergence(RuntimeError):
    """A loss term became non-finite during training."""

    def __init__(self, term, iteration, value):
        super().__init__(f"non-finite loss term {term!r} at iteration {iteration}: {value}")
        self.term = term
        self.iteration = iteration
