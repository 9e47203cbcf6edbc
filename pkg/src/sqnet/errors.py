"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class SqnetError(Exception):
    exit_code = 1


class ConfigError(SqnetError, ValueError):
    exit_code = 2


class FileAccessError(SqnetError, OSError):
    exit_code = 3


class FormatError(SqnetError, ValueError):
    """Base class for malformed or inconsistent binary files."""

    exit_code = 4


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ShapeError(FormatError):
    """Tensor shapes that do not compose, in a file or a forward pass."""

    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


class FingerprintMismatchError(FormatError):
    pass


class PlaneMismatchError(FormatError):
    pass


class InfeasibleBudgetError(SqnetError, ValueError):
    exit_code = 5


class SearchSpaceTooLargeError(SqnetError, ValueError):
    exit_code = 5

    def __init__(self, message, size):
        super().__init__(message)
        self.size = size


class SamplingStallError(SqnetError, RuntimeError):
    exit_code = 5


class NumericalError(SqnetError, ArithmeticError):
    exit_code = 6

    def __init__(self, message, trajectory=()):
        super().__init__(message)
        self.trajectory = list(trajectory)
