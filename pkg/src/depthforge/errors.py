"""Exception hierarchy shared by the library and the CLI."""


class DepthforgeError(Exception):
    """Base class for every error raised by depthforge."""


class ParameterError(DepthforgeError, ValueError):
    """An argument is outside its documented domain."""


class ConfigError(DepthforgeError):
    """A pipeline config file or CLI flag could not be accepted."""


class FormatError(DepthforgeError):
    """A file could not be parsed.

    ``line`` is the 1-based line number of the offending record, when known.
    """

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class PreconditionError(DepthforgeError):
    """Input data does not satisfy an operation's precondition."""


class ConvergenceError(DepthforgeError):
    """An iterative solver hit its iteration cap."""

    def __init__(self, message, residual=None, iterations=None):
        self.residual = residual
        self.iterations = iterations
        super().__init__(message)


class StageError(DepthforgeError):
    """Wraps a failure inside a named pipeline stage."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
