"""Exception types shared across the package."""


class ExtGazeError(Exception):
    """Base class of every error this package raises on purpose."""


class InvalidInputError(ExtGazeError, ValueError):
    """An argument violates a documented precondition."""


class GenerationError(ExtGazeError, RuntimeError):
    """A rejection sampler exhausted its retry budget."""


class ParseError(ExtGazeError, ValueError):
    """A file could not be parsed.

    ``line`` is the 1-based line number of the offending line when known.
    """

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class TrainingError(ExtGazeError, RuntimeError):
    """Training diverged (non-finite loss)."""
