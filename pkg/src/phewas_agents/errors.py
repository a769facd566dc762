"""Exception hierarchy shared by every module."""


class PhewasError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(PhewasError, ValueError):
    """Input violates a documented precondition."""


class SchemaError(ValidationError):
    """A file or cohort does not match the expected layout."""


class DegenerateInputError(ValidationError):
    """Statistic undefined for the given data (too few points, zero variance)."""


class ConfigurationError(ValidationError):
    pass


class SpecError(ValidationError):
    """Synthetic cohort specification cannot be realised."""


class ConflictError(PhewasError):
    pass


class TransportError(PhewasError):
    """Remote call failed after exhausting retries."""

    def __init__(self, message, attempts=0, last_error=None):
        super().__init__(message)
        self.attempts = attempts
        self.last_error = last_error


class ProtocolError(PhewasError):
    """Remote peer answered with a payload that fails validation."""
