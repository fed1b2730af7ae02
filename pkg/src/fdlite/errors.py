"""Exception hierarchy shared by all fdlite modules."""


class FDLiteError(Exception):
    """Base class for every error raised by fdlite."""


class ConfigurationError(FDLiteError, ValueError):
    """Invalid builder or runtime configuration."""


class StructuralError(FDLiteError, ValueError):
    """Graph or tensor shapes do not fit together."""

    def __init__(self, message, node=None):
        if node is not None:
            message = f"{node}: {message}"
        super().__init__(message)
        self.node = node


class DataError(FDLiteError, ValueError):
    """Numeric input outside an operation's domain."""


class ExecutionError(FDLiteError, RuntimeError):
    """Forward evaluation failed at a specific node."""

    def __init__(self, message, node=None):
        if node is not None:
            message = f"{node}: {message}"
        super().__init__(message)
        self.node = node


class FormatError(FDLiteError, ValueError):
    """Malformed file contents (weights, images, annotations)."""


class ParseError(FormatError):
    """Text annotation parse failure carrying a 1-based line number."""

    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
        self.line = line
        self.path = path
