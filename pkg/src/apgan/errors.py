"""Exception types shared across the package."""


class FormatError(ValueError):
    """Raised when an on-disk file cannot be decoded."""


class PreconditionError(RuntimeError):
    """Raised when a required input artifact is missing or inconsistent."""


class NonFiniteLossError(FloatingPointError):
    """Raised when training produces a NaN or infinite loss."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
