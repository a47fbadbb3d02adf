"""Optional request-path layers: tensor fusion, lossy compression, and
communication logging.

Fusion coalesces small same-typed all_reduce requests into one backend
collective, bounded by a buffer-size cap B and a wait cap T (measured from
the moment a buffer opens). Compression applies a 16-bit truncating codec
to f32 payloads of non-reducing collectives. Logging appends one record
per completed operation; fused flushes log once.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import Buffer, CommOpKind, CommRequest, DType, WorkHandle
from .errors import CodecMismatch, IoError, ValidationError

# --------------------------------------------------------------------------
# Compression

COMPRESSIBLE_KINDS = frozenset(
    {
        CommOpKind.bcast,
        CommOpKind.gather,
        CommOpKind.gatherv,
        CommOpKind.scatter,
        CommOpKind.scatterv,
        CommOpKind.all_gather,
        CommOpKind.all_gatherv,
        CommOpKind.all_to_all_single,
        CommOpKind.all_to_all,
        CommOpKind.all_to_allv,
    }
)


class Trunc16Codec:
    """f32 -> 16-bit truncation keeping sign, exponent, and the top 7
    mantissa bits; widened back with zero fill on receive.

    Round-trip error for normal x is bounded by |x| * 2**-7. Payload layout:
    4-byte magic "TR16", u32 little-endian original element count, then two
    bytes per element.
    """

    id = "trunc16"
    MAGIC = b"TR16"
    HEADER_BYTES = 8

    def wire_nbytes(self, count: int) -> int:
        return self.HEADER_BYTES + 2 * count

    def encode(self, arr: np.ndarray) -> bytes:
        if arr.dtype != np.float32:
            raise ValidationError("codec", "trunc16 compresses f32 only")
        top = (arr.view(np.uint32) >> 16).astype("<u2")
        head = self.MAGIC + np.uint32(arr.size).astype("<u4").tobytes()
        return head + top.tobytes()

    def decode(self, payload: bytes, count: int) -> np.ndarray:
        if payload[:4] != self.MAGIC:
            raise CodecMismatch(
                f"expected {self.MAGIC!r} codec header, got {payload[:4]!r}"
            )
        stored = int(np.frombuffer(payload[4:8], dtype="<u4")[0])
        if stored != count:
            raise CodecMismatch(f"codec header count {stored} != expected {count}")
        top = np.frombuffer(payload[8:], dtype="<u2").astype(np.uint32)
        return (top << 16).view(np.float32)


CODECS = {Trunc16Codec.id: Trunc16Codec()}


@dataclass(frozen=True)
class CompressionConfig:
    codec: str = Trunc16Codec.id
    kinds: frozenset = COMPRESSIBLE_KINDS

    def active_for(self, request: CommRequest):
        """Returns the codec instance when this request should be
        compressed, else None (non-f32 payloads bypass silently)."""
        if request.kind not in self.kinds or request.kind not in COMPRESSIBLE_KINDS:
            return None
        bufs = request.buffers()
        if not bufs or bufs[0].dtype is not DType.f32:
            return None
        return CODECS[self.codec]


# --------------------------------------------------------------------------
# Logging

LOG_FIELDS = ("ts_us", "rank", "op", "backend", "bytes", "dur_us", "seq", "fused")


@dataclass
class LogRecord:
    ts_us: int
    rank: int
    op: str
    backend: str
    bytes: int
    dur_us: float
    seq: int
    fused: bool
    members: int = 1

    def to_json(self) -> str:
        doc = {name: getattr(self, name) for name in LOG_FIELDS}
        doc["members"] = self.members
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "LogRecord":
        doc = json.loads(line)
        return cls(**{name: doc[name] for name in LOG_FIELDS},
                   members=doc.get("members", 1))


class CommLog:
    """Per-rank, append-only event log. Timestamps are monotonic-clock
    microseconds since construction, so records diff cleanly across runs."""

    def __init__(self, rank: int):
        self.rank = rank
        self._t0 = time.monotonic()
        self._lock = threading.Lock()
        self._records: list[LogRecord] = []

    def now_us(self) -> int:
        return int((time.monotonic() - self._t0) * 1e6)

    def emit(self, record: LogRecord) -> None:
        with self._lock:
            self._records.append(record)

    def records(self) -> list[LogRecord]:
        with self._lock:
            return list(self._records)

    def flush(self, path: str) -> None:
        try:
            with open(path, "w") as fh:
                for record in self.records():
                    fh.write(record.to_json() + "\n")
        except OSError as exc:
            raise IoError(str(exc)) from None


def load_records(path: str) -> list[LogRecord]:
    try:
        with open(path) as fh:
            return [LogRecord.from_json(line) for line in fh if line.strip()]
    except OSError as exc:
        raise IoError(str(exc)) from None


@dataclass
class BreakdownRow:
    op: str
    backend: str
    total_us: float
    percent: float
    count: int


@dataclass
class Breakdown:
    rows: list[BreakdownRow]
    total_seconds: float
    view: str


def report(paths: list[str], view: str = "sum") -> Breakdown:
    """Aggregate per-rank logs into a duration breakdown per (op, backend).

    view="sum" totals every record; view="max" first collapses the ranks'
    copies of each event (same backend/seq/op) to the slowest rank.
    """
    per_rank = [load_records(p) for p in paths]
    durations: dict[tuple[str, str], float] = {}
    counts: dict[tuple[str, str], int] = {}
    if view == "sum":
        for records in per_rank:
            for rec in records:
                key = (rec.op, rec.backend)
                durations[key] = durations.get(key, 0.0) + rec.dur_us
                counts[key] = counts.get(key, 0) + 1
    elif view == "max":
        events: dict[tuple[str, int, str], float] = {}
        for records in per_rank:
            for rec in records:
                ekey = (rec.backend, rec.seq, rec.op)
                events[ekey] = max(events.get(ekey, 0.0), rec.dur_us)
        for (backend, _seq, op), dur in events.items():
            key = (op, backend)
            durations[key] = durations.get(key, 0.0) + dur
            counts[key] = counts.get(key, 0) + 1
    else:
        raise ValidationError("view", f"unknown view {view!r}")
    grand = sum(durations.values())
    rows = [
        BreakdownRow(op, backend, total, 100.0 * total / grand if grand else 0.0,
                     counts[(op, backend)])
        for (op, backend), total in durations.items()
    ]
    rows.sort(key=lambda r: -r.total_us)
    return Breakdown(rows, grand / 1e6, view)


# --------------------------------------------------------------------------
# Tensor fusion


@dataclass(frozen=True)
class FusionConfig:
    max_bytes: int = 1 << 16  # B
    max_wait: float = 0.005  # T, seconds from buffer open
    eligible_kinds: frozenset = frozenset({CommOpKind.all_reduce})

    def __post_init__(self):
        if self.max_bytes <= 0 or self.max_wait <= 0:
            raise ValidationError("fusion", "B and T must be positive")


class _FusionBuffer:
    def __init__(self, key, deadline: float):
        self.key = key  # (backend, dtype, op)
        self.deadline = deadline
        self.members: list[tuple[CommRequest, WorkHandle, np.ndarray]] = []
        self.filled_bytes = 0


class FusionManager:
    """Per-runtime fusion state. Buffers are keyed (backend, dtype, op);
    one timer thread fires T deadlines and initiates every due flush
    before anything waits on any of them."""

    def __init__(self, runtime):
        self._runtime = runtime
        self._lock = threading.Lock()
        self._buffers: dict[tuple, _FusionBuffer] = {}
        self._cond = threading.Condition(self._lock)
        self._timer: Optional[threading.Thread] = None
        self._closed = False

    def eligible(self, config: FusionConfig, request: CommRequest) -> bool:
        return (
            request.kind in config.eligible_kinds
            and isinstance(request.input, Buffer)
            and isinstance(request.output, Buffer)
            and request.input.nbytes <= config.max_bytes
        )

    def post(self, instance, config: FusionConfig, request: CommRequest) -> WorkHandle:
        """Copy the request into a fusion buffer and return its member
        handle. Caller has verified eligibility."""
        handle = WorkHandle(instance.name, request)
        snapshot = request.input.array.copy()
        nbytes = request.input.nbytes
        key = (instance.name, request.input.dtype, request.op)
        with self._lock:
            buf = self._buffers.get(key)
            if buf is not None and buf.filled_bytes + nbytes > config.max_bytes:
                self._flush_locked(instance, buf)
                buf = None
            if buf is None:
                buf = _FusionBuffer(key, time.monotonic() + config.max_wait)
                self._buffers[key] = buf
                self._ensure_timer()
                self._cond.notify_all()
            buf.members.append((request, handle, snapshot))
            buf.filled_bytes += nbytes
            if buf.filled_bytes >= config.max_bytes:
                self._flush_locked(instance, buf)
        return handle

    def _ensure_timer(self) -> None:
        if self._timer is None or not self._timer.is_alive():
            self._timer = threading.Thread(
                target=self._timer_loop, name="fusion-timer", daemon=True
            )
            self._timer.start()

    def _timer_loop(self) -> None:
        while True:
            with self._lock:
                if self._closed:
                    return
                if not self._buffers:
                    self._cond.wait(timeout=0.5)
                    continue
                now = time.monotonic()
                next_deadline = min(b.deadline for b in self._buffers.values())
                if next_deadline > now:
                    self._cond.wait(timeout=next_deadline - now)
                    continue
                due = [b for b in self._buffers.values() if b.deadline <= now]
                # Initiate every due flush before any is waited on, so
                # partially-filled buffers on different backends overlap.
                for buf in due:
                    self._flush_locked(self._runtime._instance(buf.key[0]), buf)

    def _flush_locked(self, instance, buf: _FusionBuffer) -> None:
        self._buffers.pop(buf.key, None)
        if not buf.members:
            return
        _backend, dtype, op = buf.key
        staged = np.concatenate([snap for _r, _h, snap in buf.members])
        staging = Buffer(staged)
        flush_request = CommRequest(
            kind=CommOpKind.all_reduce,
            input=staging,
            output=staging,
            op=op,
            backend=instance.name,
            async_op=True,
        )
        flush_request._fused_members = len(buf.members)  # type: ignore[attr-defined]
        members = list(buf.members)

        def _scatter_back(flush_handle: WorkHandle) -> None:
            offset = 0
            for request, handle, snap in members:
                n = snap.shape[0]
                if flush_handle.error is None:
                    request.output.array[:] = staged[offset : offset + n]
                offset += n
                for b in request.unique_buffers():
                    b._checkin()
                if flush_handle.error is None:
                    handle.complete()
                else:
                    handle.fail(flush_handle.error)

        flush_handle = instance.post(flush_request)
        flush_handle.add_done_callback(_scatter_back)

    def flush_backend(self, name: str) -> None:
        """Flush any open buffers for one backend (used by finalize)."""
        with self._lock:
            for key in [k for k in self._buffers if k[0] == name]:
                self._flush_locked(self._runtime._instance(name), self._buffers[key])

    def open_buffers(self) -> int:
        with self._lock:
            return len(self._buffers)

    def close(self) -> None:
        with self._lock:
            self._closed = True
            self._cond.notify_all()
