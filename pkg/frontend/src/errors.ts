/**
 * Error taxonomy mirroring the runtime's error kinds one to one, so
 * callers can match on `kind` across the language boundary.
 */

export class CommError extends Error {
  kind = "comm_error";
  constructor(message: string) {
    super(message);
    this.name = new.target.name;
  }
}

export class ValidationError extends CommError {
  kind = "validation";
  constructor(public field: string, public reason: string) {
    super(`${field}: ${reason}`);
  }
}

export class InvalidRoot extends CommError {
  kind = "invalid_root";
}

export class InvalidDestination extends CommError {
  kind = "invalid_destination";
}

export class OrderMismatch extends CommError {
  kind = "order_mismatch";
}

export class CommTimeout extends CommError {
  kind = "timeout";
}

export class BootstrapTimeout extends CommTimeout {
  kind = "bootstrap_timeout";
}

export class PeerDisconnected extends CommError {
  kind = "peer_disconnected";
}

export class LengthMismatch extends CommError {
  kind = "length_mismatch";
}

export class DuplicateBackend extends CommError {
  kind = "duplicate_backend";
}

export class UnknownBackend extends CommError {
  kind = "unknown_backend";
}

export class NotInitialized extends CommError {
  kind = "not_initialized";
}

export class BackendFinalized extends CommError {
  kind = "backend_finalized";
}

export class ParseError extends CommError {
  kind = "parse_error";
}

export class MonotonicityError extends ParseError {
  kind = "monotonicity";
}

export class UnroutableRequest extends CommError {
  kind = "unroutable";
}

export class CodecMismatch extends CommError {
  kind = "codec_mismatch";
}
