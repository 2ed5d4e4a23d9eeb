"""Exception types shared across the package."""


class KevsError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(KevsError):
    """Invalid inputs, configuration, schema, or geometry (CLI exit code 2)."""


class NiftiFormatError(KevsError):
    """Unreadable or unsupported NIfTI file content (CLI exit code 1)."""
