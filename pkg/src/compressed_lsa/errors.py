"""Exception types raised across the package."""


class CompressedLSAError(Exception):
    """Base class for all package errors."""


class InvalidDimensionError(CompressedLSAError, ValueError):
    pass


class CalibrationError(CompressedLSAError, ValueError):
    pass


class UnsupportedFormulaError(CompressedLSAError, ValueError):
    """No closed form is available for the requested compressor."""


class SingularHessianError(CompressedLSAError, ValueError):
    pass


class PreconditionError(CompressedLSAError, ValueError):
    """A theorem's step-size or structural precondition does not hold."""


class ConfigurationError(CompressedLSAError, ValueError):
    pass


class InsufficientDataError(CompressedLSAError, ValueError):
    pass


class DataFormatError(CompressedLSAError, ValueError):
    pass


class DivergenceError(CompressedLSAError, RuntimeError):
    """Iterates left the finite region; ``iteration`` is the offending step."""

    def __init__(self, iteration, message=None):
        self.iteration = int(iteration)
        super().__init__(message or f"iterates diverged at iteration {self.iteration}")
