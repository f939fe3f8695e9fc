"""Exception taxonomy shared across the package.

CLI exit codes map onto these classes: DataError -> 2, ProtocolError -> 3,
NumericError -> 4, everything else -> 1.
"""


class FedbotError(Exception):
    """Base class for all package errors."""


class ShapeError(FedbotError, ValueError):
    """Tensor/matrix dimensions do not line up."""


class ContractError(FedbotError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(FedbotError, ValueError):
    """Invalid model or run configuration."""


class DataError(FedbotError, ValueError):
    """Problem with input data files or records."""


class SchemaError(DataError):
    """Input file is missing a required column or field."""


class FormatError(FedbotError, ValueError):
    """Malformed serialized bytes (bad magic, version, layout)."""


class TruncationError(FormatError):
    """Serialized payload ends before its declared size."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ProtocolError(FedbotError):
    """Wire protocol violation (bad frame, unknown message, oversize)."""


class Disconnected(FedbotError):
    """Peer closed the connection (EOF mid-frame or between frames)."""


class AggregationError(FedbotError):
    """Client updates cannot be combined (mismatched tensors)."""

    def __init__(self, message: str, client_id: str | None = None, tensor: str | None = None):
        detail = message
        if client_id is not None:
            detail += f" [client={client_id}]"
        if tensor is not None:
            detail += f" [tensor={tensor}]"
        super().__init__(detail)
        self.client_id = client_id
        self.tensor = tensor


class NumericError(FedbotError):
    """Training produced non-finite values."""
