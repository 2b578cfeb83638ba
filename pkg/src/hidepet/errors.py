"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ValueError):
    """An operation received or would persist non-finite values."""


class ContractError(RuntimeError):
    """A caller violated an operation's usage contract."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class ProtocolError(RuntimeError):
    """The continual-learning protocol was violated (e.g. out-of-order tasks)."""


class StateError(RuntimeError):
    """Required state is missing or inconsistent."""


class FormatError(ValueError):
    """A serialized file is malformed. Carries the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedVersionError(FormatError):
    """File declares a format version newer than this code understands."""


class GroupingError(ValueError):
    """Records with incompatible scenarios were mixed into one report table."""
