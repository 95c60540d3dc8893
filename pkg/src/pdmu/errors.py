"""Exception types shared across the package."""


class PdmuError(Exception):
    """Base class for library errors."""


class InvalidArgumentError(PdmuError, ValueError):
    pass


class InvalidStateError(PdmuError, RuntimeError):
    pass


class NumericOverflowError(PdmuError, ArithmeticError):
    pass


class UnsupportedModeError(PdmuError, ValueError):
    pass


class FormatError(PdmuError, ValueError):
    """Malformed data or checkpoint file; ``offset`` is the byte position if known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(PdmuError, ValueError):
    pass
