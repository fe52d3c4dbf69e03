"""Exception types shared across the package."""


class FvpError(Exception):
    """Base class for all package errors."""


class DomainError(FvpError, ValueError):
    """Invalid values or shapes passed to a numeric operation."""


class FormatError(FvpError, ValueError):
    """Corrupt or unsupported file content (bad magic, version, truncation)."""
