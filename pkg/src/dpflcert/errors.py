"""Exception types shared across the package."""


class DPFLError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DPFLError, ValueError):
    """A configuration or precondition is violated."""


class UsageError(DPFLError, ValueError):
    """An operation was called with structurally invalid input."""


class ShapeError(DPFLError, ValueError):
    """Array dimensions do not match the model or each other."""


class PatternError(DPFLError, ValueError):
    """A trigger pattern refers to features that do not exist."""


class DomainError(DPFLError, ValueError):
    """A bound was requested outside the range where it is defined."""


class FormatError(DPFLError, ValueError):
    """A file does not follow the expected binary layout.

    ``field`` names the header field or section that failed to parse.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"[{field}] {message}")
        self.field = field
