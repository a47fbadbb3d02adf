"""Exception taxonomy for the runtime.

Every error carries a stable ``kind`` string so that callers (and foreign
bindings) can match on error categories without depending on Python class
identity.
"""

from __future__ import annotations


class CommError(Exception):
    """Base class for all errors raised by this package."""

    kind = "comm_error"


class ValidationError(CommError):
    """A request is malformed. Signals a caller bug, never a transport fault."""

    kind = "validation"

    def __init__(self, field: str, reason: str):
        super().__init__(f"{field}: {reason}")
        self.field = field
        self.reason = reason


class InvalidRoot(CommError):
    kind = "invalid_root"


class InvalidDestination(CommError):
    kind = "invalid_destination"


class OrderMismatch(CommError):
    """Ranks posted different operations at the same (backend, seq) slot."""

    kind = "order_mismatch"


class CommTimeout(CommError):
    kind = "timeout"


class BootstrapTimeout(CommTimeout):
    kind = "bootstrap_timeout"


class PendingAfterTimeout(CommTimeout):
    kind = "pending_after_timeout"


class AddressInUse(CommError):
    kind = "address_in_use"


class PeerDisconnected(CommError):
    kind = "peer_disconnected"


class LengthMismatch(CommError):
    """Frame payload length disagrees with what the receiver expected."""

    kind = "length_mismatch"


class SerializationError(CommError):
    kind = "serialization"


class DuplicateBackend(CommError):
    kind = "duplicate_backend"


class UnknownBackend(CommError):
    kind = "unknown_backend"


class UnknownTransport(CommError):
    kind = "unknown_transport"


class BackendFinalized(CommError):
    kind = "backend_finalized"


class NotInitialized(CommError):
    kind = "not_initialized"


class UnsupportedOperation(CommError):
    kind = "unsupported_operation"


class ParseError(CommError):
    kind = "parse_error"


class MonotonicityError(ParseError):
    kind = "monotonicity"


class UnroutableRequest(CommError):
    kind = "unroutable"


class EmptySamples(CommError):
    kind = "empty_samples"


class CodecMismatch(CommError):
    kind = "codec_mismatch"


class IoError(CommError):
    kind = "io"
