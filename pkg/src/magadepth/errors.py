"""Exception types shared across the library."""


class MagadepthError(Exception):
    """Base class for library-specific failures."""


class DimensionError(MagadepthError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(MagadepthError, ValueError):
    """A caller violated an operation precondition."""


class ConfigError(MagadepthError, ValueError):
    """A layer or model was constructed with inconsistent settings."""


class NumericError(MagadepthError, ArithmeticError):
    """A non-finite value appeared where finite math was required."""


class FormatError(MagadepthError, ValueError):
    """A file does not match the expected on-disk format.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class EmptyEvaluationError(MagadepthError, ValueError):
    """An evaluation was requested over zero valid pixels."""
