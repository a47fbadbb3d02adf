"""Domain types shared by every other module: buffers, operation
descriptors, work handles, and request validation.

Buffers are element-typed contiguous byte regions (numpy-backed), not
framework tensors; callers own them and must not touch them between post
and completion of an operation (enforced with a checked-out flag when
``__debug__``).
"""

from __future__ import annotations

import enum
import itertools
import threading
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ValidationError


class DType(enum.Enum):
    f32 = ("<f4", 4)
    f64 = ("<f8", 8)
    i32 = ("<i4", 4)
    i64 = ("<i8", 8)
    u8 = ("|u1", 1)

    def __init__(self, np_name: str, size_bytes: int):
        self.np_dtype = np.dtype(np_name)
        self.size_bytes = size_bytes

    @property
    def is_float(self) -> bool:
        return self in (DType.f32, DType.f64)

    @classmethod
    def from_name(cls, name: str) -> "DType":
        try:
            return cls[name]
        except KeyError:
            raise ValidationError("dtype", f"unknown dtype {name!r}") from None

    @classmethod
    def from_numpy(cls, dt: np.dtype) -> "DType":
        for member in cls:
            if member.np_dtype == dt:
                return member
        raise ValidationError("dtype", f"unsupported numpy dtype {dt}")


class ReduceOp(enum.Enum):
    sum = "sum"
    prod = "prod"
    min = "min"
    max = "max"

    def identity(self, dtype: DType):
        """Identity element for accumulating reductions of this op/dtype."""
        if self is ReduceOp.sum:
            return dtype.np_dtype.type(0)
        if self is ReduceOp.prod:
            return dtype.np_dtype.type(1)
        info = (np.finfo if dtype.is_float else np.iinfo)(dtype.np_dtype)
        if self is ReduceOp.min:
            return dtype.np_dtype.type(np.inf) if dtype.is_float else info.max
        return dtype.np_dtype.type(-np.inf) if dtype.is_float else info.min

    def apply(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Elementwise reduce of two arrays. Integer ops wrap like C;
        float ops use native IEEE arithmetic."""
        if self is ReduceOp.sum:
            return a + b
        if self is ReduceOp.prod:
            return a * b
        if self is ReduceOp.min:
            return np.minimum(a, b)
        return np.maximum(a, b)


def element_reduce(a, b, op: ReduceOp):
    """Scalar form of :meth:`ReduceOp.apply` (same dtype in, same out)."""
    a = np.asarray(a)
    b = np.asarray(b)
    return op.apply(a, b)[()] if a.shape == () else op.apply(a, b)


class CommOpKind(enum.Enum):
    send = "send"
    recv = "recv"
    bcast = "bcast"
    reduce = "reduce"
    all_reduce = "all_reduce"
    gather = "gather"
    gatherv = "gatherv"
    scatter = "scatter"
    scatterv = "scatterv"
    all_gather = "all_gather"
    all_gatherv = "all_gatherv"
    reduce_scatter = "reduce_scatter"
    all_to_all_single = "all_to_all_single"
    all_to_all = "all_to_all"
    all_to_allv = "all_to_allv"


AUTO_BACKEND = "auto"

# Ops where `root` actually names a root rank. send/recv reuse the field
# for the peer rank since point-to-point has no other addressing slot.
ROOTED_KINDS = frozenset(
    {CommOpKind.bcast, CommOpKind.reduce, CommOpKind.gather, CommOpKind.gatherv,
     CommOpKind.scatter, CommOpKind.scatterv}
)
P2P_KINDS = frozenset({CommOpKind.send, CommOpKind.recv})
REDUCTION_KINDS = frozenset(
    {CommOpKind.reduce, CommOpKind.all_reduce, CommOpKind.reduce_scatter}
)
VECTORED_KINDS = frozenset(
    {CommOpKind.gatherv, CommOpKind.scatterv, CommOpKind.all_gatherv,
     CommOpKind.all_to_allv}
)


def check_backend_id(name: str) -> str:
    if not name or name != name.lower() or not all(
        c.isalnum() or c in "-_" for c in name
    ):
        raise ValidationError(
            "backend", f"backend id must be non-empty lowercase, got {name!r}"
        )
    return name


class Buffer:
    """Typed contiguous element array; the unit every operation reads or
    writes. Wraps a 1-D numpy array without copying."""

    __slots__ = ("dtype", "array", "_checked_out")

    def __init__(self, array: np.ndarray):
        if array.ndim != 1:
            raise ValidationError("buffer", "buffers must be 1-D")
        if not array.flags["C_CONTIGUOUS"]:
            raise ValidationError("buffer", "buffers must be contiguous")
        self.dtype = DType.from_numpy(array.dtype)
        self.array = array
        self._checked_out = False

    @classmethod
    def zeros(cls, dtype: DType, count: int) -> "Buffer":
        return cls(np.zeros(count, dtype=dtype.np_dtype))

    @classmethod
    def from_values(cls, dtype: DType, values: Iterable) -> "Buffer":
        return cls(np.array(list(values), dtype=dtype.np_dtype))

    @property
    def count(self) -> int:
        return self.array.shape[0]

    @property
    def nbytes(self) -> int:
        return self.count * self.dtype.size_bytes

    def tobytes(self) -> bytes:
        return self.array.tobytes()

    def write_bytes(self, raw: bytes) -> None:
        if len(raw) != self.nbytes:
            raise ValidationError(
                "buffer", f"expected {self.nbytes} bytes, got {len(raw)}"
            )
        self.array[:] = np.frombuffer(raw, dtype=self.dtype.np_dtype)

    # In-flight guard: the runtime checks buffers out at post time and back
    # in at completion; double checkout means the caller reused a buffer
    # that is still attached to a pending operation.
    def _checkout(self) -> None:
        if __debug__:
            if self._checked_out:
                raise ValidationError(
                    "buffer", "buffer is attached to an operation still in flight"
                )
            self._checked_out = True

    def _checkin(self) -> None:
        if __debug__:
            self._checked_out = False

    def __repr__(self) -> str:
        return f"Buffer({self.dtype.name}, count={self.count})"


BufferArg = Union[Buffer, Sequence[Buffer], None]


@dataclass
class CommRequest:
    """Normalized descriptor of one communication operation.

    ``root`` doubles as the peer rank for send/recv. ``seq`` is assigned by
    the owning backend at post time and strictly increases per
    (backend, rank).
    """

    kind: CommOpKind
    input: BufferArg = None
    output: BufferArg = None
    root: Optional[int] = None
    op: Optional[ReduceOp] = None
    scounts: Optional[list[int]] = None
    rcounts: Optional[list[int]] = None
    sdispls: Optional[list[int]] = None
    rdispls: Optional[list[int]] = None
    backend: str = AUTO_BACKEND
    async_op: bool = False
    seq: Optional[int] = None

    def buffers(self) -> list[Buffer]:
        out = []
        for side in (self.input, self.output):
            if isinstance(side, Buffer):
                out.append(side)
            elif side is not None:
                out.extend(side)
        return out

    def unique_buffers(self) -> list[Buffer]:
        """Distinct buffer objects (in-place ops list one buffer twice)."""
        inp, out = self.input, self.output
        if isinstance(inp, Buffer) and isinstance(out, Buffer):
            return [inp] if inp is out else [inp, out]
        if inp is None and isinstance(out, Buffer):
            return [out]
        if out is None and isinstance(inp, Buffer):
            return [inp]
        return list({id(b): b for b in self.buffers()}.values())


class HandleState(enum.Enum):
    posted = 0
    in_progress = 1
    complete = 2
    failed = 3


_handle_ids = itertools.count(1)


class WorkHandle:
    """Completion token for a posted operation.

    State moves only forward (posted -> in_progress -> complete|failed).
    One progress lane updates the state; any thread may wait() or test().
    """

    def __init__(self, backend: str, request: Optional[CommRequest] = None):
        self.id = next(_handle_ids)
        self.backend = backend
        self.request = request
        self.error: Optional[BaseException] = None
        self._state = HandleState.posted
        self._lock = threading.Lock()
        self._done = threading.Event()
        self._callbacks: list = []

    @property
    def state(self) -> HandleState:
        return self._state

    def _advance(self, new: HandleState) -> None:
        # Single-writer: only the thread executing the operation advances
        # the state, so no lock is needed around the transition itself.
        if new.value < self._state.value:
            raise RuntimeError(
                f"handle state may not move backward: {self._state} -> {new}"
            )
        self._state = new

    def mark_in_progress(self) -> None:
        self._advance(HandleState.in_progress)

    def complete(self) -> None:
        self._advance(HandleState.complete)
        self._finish()

    def fail(self, error: BaseException) -> None:
        self.error = error
        self._advance(HandleState.failed)
        self._finish()

    def _finish(self) -> None:
        self._done.set()
        with self._lock:
            callbacks, self._callbacks = self._callbacks, []
        for cb in callbacks:
            cb(self)

    def add_done_callback(self, cb) -> None:
        """Run ``cb(handle)`` once the handle reaches a final state (runs
        immediately if already final)."""
        run_now = False
        with self._lock:
            if self._done.is_set():
                run_now = True
            else:
                self._callbacks.append(cb)
        if run_now:
            cb(self)

    def wait(self, timeout: Optional[float] = None) -> None:
        """Block until complete, then return (or raise the stored error)."""
        from .errors import CommTimeout

        if not self._done.wait(timeout):
            raise CommTimeout(f"wait on handle {self.id} exceeded {timeout}s")
        if self._state is HandleState.failed:
            raise self.error

    def test(self) -> bool:
        """Non-blocking completion probe."""
        return self._done.is_set()


class CompletionEvent:
    """Marker recorded into a backend's progress lane; satisfied exactly
    when all work posted to that lane before the record point finished."""

    def __init__(self, backend: str):
        self.backend = backend
        self._event = threading.Event()

    @property
    def satisfied(self) -> bool:
        return self._event.is_set()

    def _satisfy(self) -> None:
        self._event.set()

    def wait(self, timeout: Optional[float] = None) -> bool:
        return self._event.wait(timeout)


def _as_single(buf: BufferArg, fieldname: str) -> Buffer:
    if not isinstance(buf, Buffer):
        raise ValidationError(fieldname, "expected a single buffer")
    return buf


def _check_counts(
    counts: Optional[list[int]],
    displs: Optional[list[int]],
    total: Optional[int],
    world_size: int,
    fieldname: str,
) -> None:
    if counts is None or displs is None:
        raise ValidationError(fieldname, "counts and displacements required")
    if len(counts) != world_size or len(displs) != world_size:
        raise ValidationError(
            fieldname, f"expected {world_size} entries, got {len(counts)}/{len(displs)}"
        )
    if any(c < 0 for c in counts) or any(d < 0 for d in displs):
        raise ValidationError(fieldname, "counts and displacements must be >= 0")
    if total is not None:
        segs = sorted(
            ((d, d + c) for d, c in zip(displs, counts) if c > 0), key=lambda s: s[0]
        )
        for (a0, a1), (b0, b1) in zip(segs, segs[1:]):
            if b0 < a1:
                raise ValidationError(fieldname, "segments overlap")
        for d, c in zip(displs, counts):
            if c > 0 and d + c > total:
                raise ValidationError(
                    fieldname, f"segment [{d}, {d + c}) exceeds buffer count {total}"
                )
        if sum(counts) != total:
            raise ValidationError(
                fieldname, f"expected {sum(counts)} total elements, got buffer of {total}"
            )


def _no_fields(request: CommRequest, *names: str) -> None:
    for name in names:
        if getattr(request, name) is not None:
            raise ValidationError(name, f"not a {request.kind.name} field")


_VECTOR_FIELDS = ("scounts", "rcounts", "sdispls", "rdispls")
_FORBIDDEN_VECTOR_FIELDS: dict[CommOpKind, tuple[str, ...]] = {
    kind: tuple(
        sorted(
            set(_VECTOR_FIELDS)
            - {
                CommOpKind.gatherv: {"rcounts", "rdispls"},
                CommOpKind.scatterv: {"scounts", "sdispls"},
                CommOpKind.all_gatherv: {"rcounts", "rdispls"},
                CommOpKind.all_to_allv: set(_VECTOR_FIELDS),
            }.get(kind, set())
        )
    )
    for kind in CommOpKind
}
_ROOT_KINDS = ROOTED_KINDS | P2P_KINDS


def _single_in(request: CommRequest) -> Buffer:
    return _as_single(request.input, "input")


def _single_out(request: CommRequest) -> Buffer:
    return _as_single(request.output, "output")


def _same_dtype(a: Buffer, b: Buffer) -> None:
    if a.dtype is not b.dtype:
        raise ValidationError("dtype", "input and output dtypes differ")


def validate(request: CommRequest, world_size: int, rank: Optional[int] = None) -> None:
    """Check buffer sizes, counts, displacements, root, and op against the
    request kind. Raises ValidationError on the first inconsistency.

    ``rank`` is optional; when given, rank-dependent slots (e.g. a rank's
    own segment of a vectored collective) are checked too.
    """
    kind = request.kind
    p = world_size
    if p <= 0:
        raise ValidationError("world_size", "must be positive")

    if kind in REDUCTION_KINDS:
        if request.op is None:
            raise ValidationError("op", "reduce op required")
    elif request.op is not None:
        raise ValidationError("op", f"not a {kind.name} field")

    root = request.root
    if kind in _ROOT_KINDS:
        if root is None:
            raise ValidationError("root", "required for this kind")
        if root < 0 or root >= p:
            raise ValidationError("root", f"rank {root} outside world {p}")
    elif root is not None:
        raise ValidationError("root", f"not a {kind.name} field")

    forbidden = _FORBIDDEN_VECTOR_FIELDS[kind]
    if forbidden:
        _no_fields(request, *forbidden)

    if kind is CommOpKind.send:
        _single_in(request)
        if request.output is not None:
            raise ValidationError("output", "not a send field")
        return
    if kind is CommOpKind.recv:
        _single_out(request)
        if request.input is not None:
            raise ValidationError("input", "not a recv field")
        return
    if kind is CommOpKind.bcast:
        _single_out(request)
        if request.input is not None:
            raise ValidationError("input", "not a bcast field")
        return
    if kind in (CommOpKind.reduce, CommOpKind.all_reduce):
        i, o = _single_in(request), _single_out(request)
        _same_dtype(i, o)
        if i.count != o.count:
            raise ValidationError("output", f"expected {i.count}, got {o.count}")
        return
    if kind is CommOpKind.all_gather:
        i, o = _single_in(request), _single_out(request)
        _same_dtype(i, o)
        if o.count != p * i.count:
            raise ValidationError("output", f"expected {p * i.count}")
        return
    if kind is CommOpKind.all_to_all_single:
        i, o = _single_in(request), _single_out(request)
        _same_dtype(i, o)
        if i.count != o.count:
            raise ValidationError("output", f"expected {i.count}")
        if i.count % p != 0:
            raise ValidationError("input", f"count {i.count} not divisible by {p}")
        return
    if kind is CommOpKind.reduce_scatter:
        i, o = _single_in(request), _single_out(request)
        _same_dtype(i, o)
        if i.count != p * o.count:
            raise ValidationError("input", f"expected {p * o.count}")
        return
    if kind is CommOpKind.gather:
        i = _single_in(request)
        if request.output is not None:
            o = _single_out(request)
            _same_dtype(i, o)
            if o.count != p * i.count:
                raise ValidationError("output", f"expected {p * i.count}")
        elif rank is not None and rank == request.root:
            raise ValidationError("output", "root must supply the output buffer")
        return
    if kind is CommOpKind.scatter:
        o = _single_out(request)
        if request.input is not None:
            i = _single_in(request)
            _same_dtype(i, o)
            if i.count != p * o.count:
                raise ValidationError("input", f"expected {p * o.count}")
        elif rank is not None and rank == request.root:
            raise ValidationError("input", "root must supply the input buffer")
        return
    if kind is CommOpKind.gatherv:
        i = _single_in(request)
        total = None
        if request.output is not None:
            o = _single_out(request)
            _same_dtype(i, o)
            total = o.count
        elif rank is not None and rank == request.root:
            raise ValidationError("output", "root must supply the output buffer")
        _check_counts(request.rcounts, request.rdispls, total, p, "rcounts")
        if rank is not None and i.count != request.rcounts[rank]:
            raise ValidationError(
                "input", f"rank {rank} must contribute rcounts[{rank}]="
                f"{request.rcounts[rank]} elements, got {i.count}"
            )
    elif kind is CommOpKind.scatterv:
        o = _single_out(request)
        total = None
        if request.input is not None:
            i = _single_in(request)
            _same_dtype(i, o)
            total = i.count
        elif rank is not None and rank == request.root:
            raise ValidationError("input", "root must supply the input buffer")
        _check_counts(request.scounts, request.sdispls, total, p, "scounts")
        if rank is not None and o.count != request.scounts[rank]:
            raise ValidationError(
                "output", f"rank {rank} receives scounts[{rank}]="
                f"{request.scounts[rank]} elements, got buffer of {o.count}"
            )
    elif kind is CommOpKind.all_gatherv:
        i, o = _single_in(request), _single_out(request)
        _same_dtype(i, o)
        _check_counts(request.rcounts, request.rdispls, o.count, p, "rcounts")
        if rank is not None and i.count != request.rcounts[rank]:
            raise ValidationError(
                "input", f"expected rcounts[{rank}]={request.rcounts[rank]}"
            )
    elif kind is CommOpKind.all_to_all:
        for name, side in (("input", request.input), ("output", request.output)):
            if side is None or isinstance(side, Buffer):
                raise ValidationError(name, f"expected a list of {p} buffers")
            if len(side) != p:
                raise ValidationError(name, f"expected {p} buffers, got {len(side)}")
        dts = {b.dtype for b in request.buffers()}
        if len(dts) != 1:
            raise ValidationError("dtype", "all buffers must share one dtype")
    elif kind is CommOpKind.all_to_allv:
        i, o = _single_in(request), _single_out(request)
        _same_dtype(i, o)
        _check_counts(request.scounts, request.sdispls, i.count, p, "scounts")
        _check_counts(request.rcounts, request.rdispls, o.count, p, "rcounts")
    else:  # pragma: no cover
        raise ValidationError("kind", f"unhandled kind {kind}")
