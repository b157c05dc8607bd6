"""Exception types shared across the package."""


class InputError(ValueError):
    """Raised when caller-supplied data violates an operation's contract."""


class ConfigError(ValueError):
    """Raised when inputs are inconsistent with the configured model/run."""


class FormatError(ValueError):
    """Raised on malformed serialized containers.

    Carries the byte offset at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDiverged(RuntimeError):
    """Raised when an optimization step produces a non-finite loss."""
