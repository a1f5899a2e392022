"""Exception types shared across the package."""


class InputValidationError(ValueError):
    """Raised when an argument violates a documented precondition."""


class NumericalError(ArithmeticError):
    """An iterative routine failed to converge or a computation blew up.

    ``residual`` carries the last residual norm (or Rayleigh quotient, or
    blow-up time) so callers can report how far off the result was.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class PoisonedRunError(ArithmeticError):
    """A NaN/Inf loss appeared during training.

    The partially filled run record (flagged invalid) is attached as
    ``record``.
    """

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


class ConfigError(ValueError):
    def __init__(self, message, path=None, key=None):
        where = []
        if path is not None:
            where.append(str(path))
        if key is not None:
            where.append(f"key {key!r}")
        super().__init__(f"{': '.join(where)}: {message}" if where else message)
        self.path = path
        self.key = key


class ArchiveError(OSError):
    """Base class for run-archive problems."""


class ArchiveParseError(ArchiveError):
    def __init__(self, message, path=None, line=None):
        loc = str(path) if path is not None else "<archive>"
        if line is not None:
            loc += f":{line}"
        super().__init__(f"{loc}: {message}")
        self.path = path
        self.line = line


class SchemaVersionError(ArchiveError):
    pass


class NotAnArchiveError(ArchiveError):
    pass


class MissingSeriesError(KeyError):
    pass
