"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A config is internally inconsistent or does not match its input."""


class NumericError(RuntimeError):
    """A computation produced non-finite or otherwise invalid values."""


class DegenerateInput(ValueError):
    """Input carries no usable signal (e.g. a constant-valued map)."""


class CheckpointError(RuntimeError):
    """A checkpoint or tensor archive could not be read or does not match."""


class PerceptualWeightsError(RuntimeError):
    """Pre-trained perceptual-net weights are required but unavailable."""


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss; carries the path of the last good checkpoint."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
