"""Exception hierarchy shared by every module."""


class RankDistillError(Exception):
    """Base class for all package errors."""


class DataError(RankDistillError):
    """Input data is malformed or inconsistent."""


class ParseError(DataError):
    """A file could not be parsed.

    ``line`` is the 1-based line number of the offending record, when known.
    """

    def __init__(self, message, path=None, line=None):
        location = ""
        if path is not None:
            location = f"{path}"
            if line is not None:
                location += f":{line}"
            location += ": "
        super().__init__(location + message)
        self.path = path
        self.line = line


class IntegrityError(DataError):
    """Data parsed fine but violates an invariant (duplicate ids, bad grades, ...)."""


class TrainingDivergedError(RankDistillError):
    """A non-finite loss was produced during training."""

    def __init__(self, message, step=None, batch_ids=None):
        super().__init__(message)
        self.step = step
        self.batch_ids = batch_ids
