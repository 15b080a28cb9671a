"""Exception hierarchy shared by all modules."""


class RelCusumError(Exception):
    """Base class for all package errors."""


class ParseError(RelCusumError, ValueError):
    """Malformed input file; carries the offending line number when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(RelCusumError, ValueError):
    """Input parsed but violates a documented invariant."""


class SupportError(RelCusumError, ValueError):
    """A hazard was evaluated outside the range where it is defined."""


class ConfigurationError(RelCusumError, ValueError):
    """Inconsistent combination of model, data and monitoring settings."""


class ModelInconsistencyError(RelCusumError, ValueError):
    """Observed data is impossible under the in-control model (e.g. an event at zero hazard)."""
