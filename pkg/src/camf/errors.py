"""Exception types shared across the package."""


class CamfError(Exception):
    """Base class for all package errors."""


class InvalidShapeError(CamfError, ValueError):
    pass


class InvalidConfigError(CamfError, ValueError):
    pass


class InvalidInputError(CamfError, ValueError):
    pass


class DataError(CamfError, ValueError):
    """A dataset or checkpoint record is malformed.

    ``entry_id`` names the offending record when one is known.
    """

    def __init__(self, message: str, entry_id: str | None = None):
        if entry_id is not None:
            message = f"entry {entry_id!r}: {message}"
        super().__init__(message)
        self.entry_id = entry_id


class SequenceLengthError(CamfError, ValueError):
    pass


class UndefinedScoreError(CamfError, ValueError):
    pass
