"""Exception types raised across the package."""


class SfeegError(Exception):
    """Base class for all package errors."""


class ShapeError(SfeegError, ValueError):
    pass


class StateError(SfeegError, RuntimeError):
    pass


class NumericError(SfeegError, ArithmeticError):
    pass


class ParameterError(SfeegError, ValueError):
    pass


class ParseError(SfeegError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CheckpointError(SfeegError):
    """Raised when a checkpoint file cannot be loaded."""


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class DimensionError(CheckpointError, ShapeError):
    pass


class DegenerateCentroidError(SfeegError):
    pass


class StageError(SfeegError):
    """Wraps a failure inside one pipeline stage."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
