"""Exception types shared across the package."""


class BoxQueryError(Exception):
    """Base class for all boxquery errors."""


class ParseError(BoxQueryError):
    """A triple file or serialized artifact could not be parsed."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        loc = ""
        if path is not None:
            loc += f"{path}"
        if line is not None:
            loc += f":{line}"
        super().__init__(f"{loc}: {message}" if loc else message)
        self.path = path
        self.line = line


class VocabularyError(BoxQueryError):
    """An entity or relation name violates the vocabulary contract."""


class SamplingError(BoxQueryError):
    """Query instantiation or negative sampling could not satisfy its request."""


class TrainingError(BoxQueryError):
    """Training aborted, e.g. on non-finite gradients or loss."""


class CompatibilityError(BoxQueryError):
    """A checkpoint does not match the graphs it is being used with."""
