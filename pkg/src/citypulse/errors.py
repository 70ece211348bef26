"""Exception hierarchy shared by the pipeline stages."""


class CityPulseError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(CityPulseError, ValueError):
    pass


class StorageError(CityPulseError, OSError):
    pass


class ParseError(CityPulseError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConflictError(CityPulseError):
    pass


class UnknownTopicError(CityPulseError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class TransientAppendError(CityPulseError):
    """Append attempt failed in a way that a retry may fix."""


class QueueFullError(TransientAppendError):
    pass


class BackpressureError(CityPulseError):
    def __init__(self, message: str, attempts: int):
        self.attempts = attempts
        super().__init__(f"{message} (after {attempts} attempts)")


class OffsetRangeError(CityPulseError, ValueError):
    pass


class InsufficientDataError(CityPulseError, ValueError):
    pass


class DegenerateClusteringError(InsufficientDataError):
    pass


class InvariantViolation(CityPulseError, AssertionError):
    pass
