"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError (and its
subclasses) -> 3, NumericError -> 4.
"""


class TunetError(Exception):
    """Base class for all package errors."""


class ShapeError(TunetError):
    """Tensor extents violate an operation's dimension contract."""


class ContractError(TunetError):
    """An API precondition was violated (non-scalar loss, label out of range, ...)."""


class ConfigError(TunetError):
    """Invalid or inconsistent configuration."""


class CheckpointError(ConfigError):
    """Checkpoint incompatible with the requested model configuration."""


class DataError(TunetError):
    """Problem with dataset files or their contents."""


class ParseError(DataError):
    """Malformed file header or manifest; carries a byte offset where known."""


class IntegrityError(DataError):
    """Structurally valid file whose payload does not match its header."""


class ValidationError(DataError):
    """Well-formed file carrying semantically invalid values."""


class NumericError(TunetError):
    """Non-finite values where finite ones are required."""
