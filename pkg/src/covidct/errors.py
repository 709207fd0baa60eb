"""Exception hierarchy shared across the package."""


class CovidCTError(Exception):
    """Base class for all package errors."""


class ValidationError(CovidCTError, ValueError):
    """Input violates a documented precondition or invariant."""


class FormatError(CovidCTError):
    """A container file is missing required fields or is malformed."""


class CorruptionError(CovidCTError):
    """Payload size or content disagrees with its declared metadata."""


class UnsupportedFormatError(FormatError):
    """The file uses a dtype or layout this package does not handle."""


class StateError(CovidCTError):
    """An object was used in the wrong lifecycle state (e.g. unfrozen weights)."""


class TrainingError(CovidCTError):
    """Optimisation diverged or produced non-finite values."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class UndefinedMetricError(CovidCTError, ValueError):
    """A metric is undefined for the given inputs (e.g. single-class ROC)."""


class PrerequisiteError(CovidCTError):
    """An upstream artifact is missing; ``command`` names the subcommand that makes it."""

    def __init__(self, message, command=None):
        super().__init__(message)
        self.command = command
