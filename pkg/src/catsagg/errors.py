"""Exception hierarchy shared by every module."""


class CatsError(Exception):
    """Base class for all package errors."""


class DimensionError(CatsError, ValueError):
    pass


class ParameterError(CatsError, ValueError):
    pass


class ConfigurationError(CatsError, ValueError):
    pass


class UsageError(CatsError, RuntimeError):
    pass


class EvaluationError(CatsError, ValueError):
    pass


class NonFiniteError(CatsError, FloatingPointError):
    """An engine operation produced NaN or Inf."""


class TrainingError(CatsError, RuntimeError):
    pass


class FormatError(CatsError, ValueError):
    """Malformed binary or text file. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
