"""Exception types shared across the package."""


class IfomError(Exception):
    """Base class for all package errors."""


class InvalidInputError(IfomError, ValueError):
    """An argument has the wrong shape, modality, label or length."""


class InvalidSpecError(IfomError, ValueError):
    """A transform or generator spec is malformed."""


class InsufficientDataError(IfomError, ValueError):
    """A metric was asked for with an empty class."""


class IncompatibleCheckpointError(IfomError):
    """A checkpoint does not match the format version or the requested config."""
