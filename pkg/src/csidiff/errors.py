"""Exception hierarchy shared by the library and the command line."""


class CsiDiffError(Exception):
    """Base class for all package errors."""


class ConfigError(CsiDiffError, ValueError):
    """Invalid configuration value or file."""


class DataError(CsiDiffError, ValueError):
    """Problem with a dataset, codeword container or other input file."""


class MalformedHeaderError(DataError):
    pass


class ShapeMismatchError(DataError):
    pass


class TruncatedFileError(DataError):
    def __init__(self, message, sample_index=None):
        super().__init__(message)
        self.sample_index = sample_index


class ContainerError(DataError):
    """Codeword container with a bad header or a short payload."""


class CheckpointError(CsiDiffError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError, ValueError):
    pass


class NumericalError(CsiDiffError, ArithmeticError):
    """Non-finite loss or output during training or decoding."""
