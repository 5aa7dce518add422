class DistConformalError(Exception):
    """Base class for errors raised by this package."""


class InvalidInputError(DistConformalError, ValueError):
    pass


class InvalidSplitError(InvalidInputError):
    """A null sample cannot be divided into non-empty training and calibration parts."""


class InsufficientDataError(InvalidInputError):
    """Too few points to form the requested number of blocks."""


class InvalidSpecError(InvalidInputError):
    pass


class CorruptPayloadError(DistConformalError, ValueError):
    """A serialized model could not be decoded."""

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        if position is not None:
            message = f"{message} (at byte {position})"
        super().__init__(message)
