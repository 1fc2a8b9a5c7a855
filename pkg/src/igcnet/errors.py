"""Exception types raised across the package."""


class IgcError(Exception):
    """Base class for all package errors."""


class ShapeError(IgcError, ValueError):
    pass


class GeometryError(IgcError, ValueError):
    pass


class ConfigError(IgcError, ValueError):
    pass


class InputError(IgcError, ValueError):
    pass


class FormatError(IgcError, ValueError):
    """Malformed dataset file; carries the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(IgcError, ValueError):
    """Checkpoint is unreadable or incompatible with the expected format."""
