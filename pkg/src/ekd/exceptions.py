"""Exception hierarchy shared across the package."""


class EKDError(Exception):
    """Base class for every error raised by this package."""


class MalformedFileError(EKDError, ValueError):
    """Raw dataset bytes do not split into whole records."""


class CorruptRecordError(EKDError, ValueError):
    """A record carries a label outside the class range."""

    def __init__(self, message, record_index):
        super().__init__(message)
        self.record_index = record_index


class InfeasibleFractionError(EKDError, ValueError):
    """A stratified subsample would leave some class empty."""


class InvalidSpecError(EKDError, ValueError):
    pass


class ShapeError(EKDError, ValueError):
    """Input tensor shape does not match what a layer expects."""

    def __init__(self, message, layer):
        super().__init__(message)
        self.layer = layer


class InvalidInputError(EKDError, ValueError):
    pass


class PairingError(EKDError, ValueError):
    """Student branches and teacher sub-networks cannot be paired by index."""


class ConfigurationError(EKDError, ValueError):
    pass


class DivergedError(EKDError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch):
        super().__init__(message)
        self.epoch = epoch


class CheckpointError(EKDError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    def __init__(self, message, tensor_name):
        super().__init__(message)
        self.tensor_name = tensor_name


class ConfigError(EKDError, ValueError):
    """Problem in an experiment config file, tagged with its line number."""

    def __init__(self, message, line=None, key=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
        self.key = key


class DatasetMissingError(EKDError, FileNotFoundError):
    pass


class ComparabilityError(EKDError, ValueError):
    """Records passed to a report cannot be shown side by side."""
