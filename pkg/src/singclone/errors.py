"""Exception types shared across the package."""


class SingCloneError(Exception):
    """Base class for all package errors."""


class DimensionError(SingCloneError, ValueError):
    pass


class ContractError(SingCloneError, ValueError):
    pass


class NumericError(SingCloneError, ArithmeticError):
    """Raised when a computation produces non-finite values."""


class ConfigError(SingCloneError, ValueError):
    pass


class SpeakerIdError(SingCloneError, IndexError):
    pass


class EmptyInputError(SingCloneError, ValueError):
    pass


class FormatError(SingCloneError):
    """File has the wrong magic bytes or an unsupported version."""


class CorruptionError(SingCloneError):
    """File is truncated or its header disagrees with its payload."""
