"""Exception types shared across the package."""


class ScrollNetError(Exception):
    """Base class for all package errors."""


class DimensionError(ScrollNetError, ValueError):
    """Operand shapes do not conform."""


class InputError(ScrollNetError, ValueError):
    """A value (label, batch, argument) is outside the accepted domain."""


class ContractError(ScrollNetError, RuntimeError):
    """An API precondition was violated by the caller."""


class ConfigError(ScrollNetError, ValueError):
    """Invalid configuration. Carries the offending dotted key when known."""

    def __init__(self, message, key=None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class ParseError(ScrollNetError, ValueError):
    """Malformed dataset file. Carries a byte offset or line number when known."""

    def __init__(self, message, offset=None, line=None):
        loc = ""
        if offset is not None:
            loc = f" (byte offset {offset})"
        elif line is not None:
            loc = f" (line {line})"
        super().__init__(message + loc)
        self.offset = offset
        self.line = line


class TrainingDiverged(ScrollNetError, RuntimeError):
    """Training produced a non-finite loss. Carries a diagnostics dict."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
