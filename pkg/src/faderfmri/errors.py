"""Exception types raised across the package."""


class FaderError(Exception):
    """Base class for package errors."""


class FormatError(FaderError, ValueError):
    """A container file has a malformed header."""


class DimensionError(FaderError, ValueError):
    """Array shapes do not satisfy a size contract."""


class DataError(FaderError, ValueError):
    """Payload is truncated or contains non-finite values."""


class DomainError(FaderError, ValueError):
    """A value lies outside its allowed domain (labels, sites, parameters)."""


class DuplicateIdError(DomainError):
    pass


class SplitError(FaderError, ValueError):
    pass


class TrainingDivergenceError(FaderError, RuntimeError):
    """Raised when a loss becomes non-finite. Carries the step and the history so far."""

    def __init__(self, step, history=None, message=None):
        self.step = step
        self.history = history
        super().__init__(message or f"non-finite loss at step {step}")


class MissingArtifactError(FaderError, FileNotFoundError):
    pass
