"""User-facing runtime: backend registry and lifecycle, posting, work
handles, waits, and mixed-backend deadlock-free synchronize.

Each backend owns one progress lane (a daemon thread) that executes its
posted operations in seq order, one collective in flight at a time.
Callers interact through queues and handles, so lanes on different
backends make progress independently of each other and of the order in
which callers wait; that independence is what lets a program overlap work
across backends without deadlocking. One refinement: a blocking post that
finds its backend idle runs the operation on the caller thread under the
same single-in-flight lock, saving four thread handoffs per call without
changing observable semantics (async posts always go to the lane).
"""

from __future__ import annotations

import os
import queue
import threading
import time
from dataclasses import dataclass
from typing import Optional, Sequence, Union

from . import dispatch
from .collectives import AlgorithmPolicy, run_collective
from .core import (
    AUTO_BACKEND,
    Buffer,
    CommOpKind,
    CommRequest,
    CompletionEvent,
    ReduceOp,
    WorkHandle,
    check_backend_id,
    validate,
)
from .errors import (
    BackendFinalized,
    CommError,
    DuplicateBackend,
    LengthMismatch,
    NotInitialized,
    OrderMismatch,
    PendingAfterTimeout,
    UnknownBackend,
    UnknownTransport,
    ValidationError,
)
from .middleware import (
    CommLog,
    CompressionConfig,
    FusionConfig,
    FusionManager,
    LogRecord,
)
from .transport import (
    KIND_P2P,
    CostShape,
    InprocFabric,
    ShapedTransport,
    TcpTransport,
    Transport,
)

DEFAULT_TIMEOUT_SECS = 30.0

ENV_RANK = "MCRDL_RANK"
ENV_WORLD_SIZE = "MCRDL_WORLD_SIZE"
ENV_MASTER_ADDR = "MCRDL_MASTER_ADDR"
ENV_MASTER_PORT = "MCRDL_MASTER_PORT"
ENV_TIMEOUT = "MCRDL_TIMEOUT_SECS"
ENV_TUNING_TABLE = "MCRDL_TUNING_TABLE"


@dataclass
class BackendConfig:
    """One backend = transport x algorithm policy x optional cost shape,
    plus optional middleware."""

    name: str
    transport: str = "inproc"
    shape: Optional[CostShape] = None
    policy: Optional[AlgorithmPolicy] = None
    fusion: Optional[FusionConfig] = None
    compression: Optional[CompressionConfig] = None
    master_addr: Optional[str] = None
    master_port: Optional[int] = None
    listen_host: str = "127.0.0.1"


class _Stop:
    pass


class BackendInstance:
    """A registered backend: its transport, policy, and progress lane."""

    def __init__(
        self,
        config: BackendConfig,
        transport: Transport,
        runtime: "Runtime",
    ):
        self.config = config
        self.name = config.name
        self.transport = transport
        self.policy = config.policy or AlgorithmPolicy()
        self.runtime = runtime
        self.state = "initialized"
        self.collectives_executed = 0
        self._seq = 0
        # One lock covers seq assignment, the pending count, and the error
        # list; post and completion each take it once.
        self._state_lock = threading.Lock()
        self._pending = 0
        self._errors: list[BaseException] = []
        # Serializes operation execution between the lane and callers
        # taking the idle-lane fast path; per-backend single in flight.
        self._exec_lock = threading.Lock()
        self._queue: "queue.SimpleQueue" = queue.SimpleQueue()
        self._lane = threading.Thread(
            target=self._run,
            name=f"lane-{self.name}-r{transport.rank}",
            daemon=True,
        )
        self._lane.start()

    @property
    def rank(self) -> int:
        return self.transport.rank

    @property
    def world_size(self) -> int:
        return self.transport.world_size

    def next_seq(self) -> int:
        with self._state_lock:
            seq = self._seq
            self._seq += 1
            return seq

    def post(self, request: CommRequest) -> WorkHandle:
        if self.state != "initialized":
            raise BackendFinalized(f"backend {self.name!r} is {self.state}")
        handle = WorkHandle(self.name, request)
        inline = False
        with self._state_lock:
            request.seq = self._seq
            self._seq += 1
            # Idle lane and a blocking caller that would wait anyway: run
            # on the caller thread and skip four thread handoffs. The exec
            # lock is claimed before the op becomes visible, so a later
            # post cannot overtake it; FIFO holds because this op is the
            # oldest outstanding.
            if (
                not request.async_op
                and self._pending == 0
                and self._exec_lock.acquire(blocking=False)
            ):
                inline = True
            self._pending += 1
            if not inline:
                self._queue.put((request, handle))
        if inline:
            try:
                self._process(request, handle)
            finally:
                self._exec_lock.release()
        return handle

    def record_event(self) -> CompletionEvent:
        event = CompletionEvent(self.name)
        self._queue.put(event)
        return event

    def pending_count(self) -> int:
        with self._state_lock:
            return self._pending

    def drain_errors(self) -> list[BaseException]:
        with self._state_lock:
            errors, self._errors = self._errors, []
            return errors

    def _run(self) -> None:
        while True:
            item = self._queue.get()
            if isinstance(item, _Stop):
                return
            if isinstance(item, CompletionEvent):
                with self._exec_lock:
                    item._satisfy()
                continue
            request, handle = item
            with self._exec_lock:
                self._process(request, handle)

    def _process(self, request: CommRequest, handle: WorkHandle) -> None:
        handle.mark_in_progress()
        started = time.monotonic()
        try:
            self.execute(request)
        except BaseException as exc:  # noqa: BLE001 - surfaced via handle
            with self._state_lock:
                self._errors.append(exc)
            self._checkin(request)
            handle.fail(exc)
        else:
            self._log(request, time.monotonic() - started)
            self._checkin(request)
            handle.complete()
        finally:
            with self._state_lock:
                self._pending -= 1

    @staticmethod
    def _checkin(request: CommRequest) -> None:
        for buf in request.unique_buffers():
            buf._checkin()

    def _log(self, request: CommRequest, duration: float) -> None:
        log = self.runtime.comm_log
        members = getattr(request, "_fused_members", 0)
        log.emit(
            LogRecord(
                ts_us=log.now_us(),
                rank=self.rank,
                op=request.kind.value,
                backend=self.name,
                bytes=dispatch.message_bytes(request, self.world_size),
                dur_us=max(duration * 1e6, 0.001),
                seq=request.seq or 0,
                fused=members > 0,
                members=members or 1,
            )
        )

    def execute(self, request: CommRequest) -> None:
        """Run one operation to completion on the calling thread. The lane
        is the normal caller; calling directly is only valid when nothing
        is in flight on this backend."""
        deadline = time.monotonic() + self.runtime.timeout
        kind = request.kind
        if kind is CommOpKind.send:
            self.transport.send(
                request.root, request.input.tobytes(), kind=KIND_P2P,
                seq=request.seq or 0,
            )
            return
        if kind is CommOpKind.recv:
            frame = self.transport.recv(request.root, deadline)
            if frame.kind != KIND_P2P:
                raise OrderMismatch(
                    f"expected payload frame from rank {request.root}, "
                    f"got kind {frame.kind}"
                )
            if len(frame.payload) != request.output.nbytes:
                raise LengthMismatch(
                    f"expected {request.output.nbytes} bytes, "
                    f"got {len(frame.payload)}"
                )
            request.output.write_bytes(frame.payload)
            return
        codec = None
        if self.config.compression is not None:
            codec = self.config.compression.active_for(request)
        run_collective(
            self.transport,
            self.rank,
            self.world_size,
            request,
            self.policy.algorithm(kind),
            deadline=deadline,
            codec=codec,
            codec_id=codec.id if codec else None,
        )
        self.collectives_executed += 1

    def finalize(self, timeout: float) -> None:
        if self.state == "finalized":
            return
        event = self.record_event()
        if not event.wait(timeout):
            raise PendingAfterTimeout(
                f"backend {self.name!r} still has pending work after {timeout}s"
            )
        self.state = "finalized"
        self._queue.put(_Stop())
        self._lane.join(timeout=5.0)
        self.transport.close()


class Runtime:
    """One rank's view of the communication world.

    Thread-safe posting: any caller thread may post; seq assignment is
    atomic per backend. Handles may be waited from any thread.
    """

    def __init__(
        self,
        rank: Optional[int] = None,
        world_size: Optional[int] = None,
        *,
        fabric: Optional[InprocFabric] = None,
        master_addr: Optional[str] = None,
        master_port: Optional[int] = None,
        timeout: Optional[float] = None,
    ):
        if rank is None:
            rank = int(os.environ.get(ENV_RANK, "0"))
        if world_size is None:
            world_size = int(
                os.environ.get(ENV_WORLD_SIZE, str(fabric.world_size if fabric else 1))
            )
        if timeout is None:
            timeout = float(os.environ.get(ENV_TIMEOUT, DEFAULT_TIMEOUT_SECS))
        self.rank = rank
        self.world_size = world_size
        self.fabric = fabric
        self.master_addr = master_addr or os.environ.get(ENV_MASTER_ADDR, "127.0.0.1")
        self.master_port = master_port or int(os.environ.get(ENV_MASTER_PORT, "0") or 0)
        self.timeout = timeout
        self.comm_log = CommLog(rank)
        self.tuning_table: Optional[dispatch.TuningTable] = None
        self._registry: dict[str, BackendInstance] = {}
        self._registry_lock = threading.Lock()
        self._registered_ids: tuple[str, ...] = ()
        self._fusion: Optional[FusionManager] = None
        table_path = os.environ.get(ENV_TUNING_TABLE)
        if table_path:
            self.tuning_table = dispatch.load_table(table_path)

    # -- lifecycle ---------------------------------------------------------

    def init(self, backends: Sequence[Union[BackendConfig, str]]) -> None:
        configs = [
            BackendConfig(name=b) if isinstance(b, str) else b for b in backends
        ]
        names = [check_backend_id(c.name) for c in configs]
        if len(set(names)) != len(names):
            raise DuplicateBackend(f"duplicate backend ids in {names}")
        for config in configs:
            if config.name == AUTO_BACKEND:
                raise ValidationError("backend", '"auto" is reserved')
            with self._registry_lock:
                if config.name in self._registry:
                    continue  # init is idempotent per id
            transport = self._build_transport(config)
            if config.shape is not None:
                transport = ShapedTransport(transport, config.shape)
            instance = BackendInstance(config, transport, self)
            if config.fusion is not None and self._fusion is None:
                self._fusion = FusionManager(self)
            with self._registry_lock:
                self._registry[config.name] = instance
                self._registered_ids = tuple(self._registry)

    def _build_transport(self, config: BackendConfig) -> Transport:
        if config.transport == "inproc":
            if self.fabric is None:
                raise UnknownTransport(
                    "inproc backends need a shared fabric; construct the "
                    "Runtime with fabric=InprocFabric(world_size)"
                )
            return self.fabric.transport(config.name, self.rank)
        if config.transport == "tcp":
            port = config.master_port
            if port is None:
                ntcp = sum(
                    1 for inst in self._registry.values()
                    if inst.config.transport == "tcp"
                )
                port = self.master_port + ntcp
            return TcpTransport(
                self.rank,
                self.world_size,
                config.master_addr or self.master_addr,
                port,
                listen_host=config.listen_host,
                timeout=self.timeout,
            )
        raise UnknownTransport(f"unknown transport {config.transport!r}")

    def finalize(self, backends: Optional[Sequence[str]] = None) -> None:
        names = list(backends) if backends is not None else self.get_backends()
        for name in names:
            instance = self._instance(name)
            if self._fusion is not None:
                self._fusion.flush_backend(name)
            instance.finalize(self.timeout)
        if self._fusion is not None and not any(
            inst.state == "initialized" for inst in self._registry.values()
        ):
            self._fusion.close()

    def close(self) -> None:
        try:
            self.finalize()
        except CommError:
            pass

    def __enter__(self) -> "Runtime":
        return self

    def __exit__(self, *_exc) -> None:
        self.close()

    # -- introspection -----------------------------------------------------

    def get_backends(self) -> list[str]:
        return list(self._registered_ids)

    def _instance(self, name: str) -> BackendInstance:
        # Registry reads are lock-free: the dict only mutates during init,
        # and CPython dict reads are atomic.
        instance = self._registry.get(name)
        if instance is None:
            raise UnknownBackend(f"backend {name!r} is not registered")
        return instance

    def get_size(self, backend: str) -> int:
        return self._instance(backend).world_size

    def get_rank(self, backend: str) -> int:
        return self._instance(backend).rank

    # -- posting -----------------------------------------------------------

    def post(self, request: CommRequest) -> WorkHandle:
        if not self._registry:
            raise NotInitialized("call init() before posting operations")
        validate(request, self.world_size, self.rank)
        if request.backend == AUTO_BACKEND:
            request.backend = dispatch.route(
                self.tuning_table,
                request.kind,
                self.world_size,
                dispatch.message_bytes(request, self.world_size),
                self._registered_ids,
            )
        instance = self._instance(request.backend)
        if instance.state != "initialized":
            raise BackendFinalized(f"backend {request.backend!r} is finalized")
        for buf in request.unique_buffers():
            buf._checkout()
        config = instance.config
        if (
            config.fusion is not None
            and self._fusion is not None
            and self._fusion.eligible(config.fusion, request)
        ):
            handle = self._fusion.post(instance, config.fusion, request)
        else:
            handle = instance.post(request)
        if not request.async_op:
            if handle.error is not None:
                raise handle.error
            if not handle.test():
                self.wait(handle)
        return handle

    def wait(self, handle: WorkHandle) -> None:
        handle.wait(self.timeout * 2 + 5.0)

    @staticmethod
    def test(handle: WorkHandle) -> bool:
        return handle.test()

    def synchronize(self, backends: Optional[Sequence[str]] = None) -> None:
        """Drain the listed backends (registry order) via completion events
        recorded now. All work posted before this call is complete on
        return; the first failure is raised after every lane drains."""
        order = self.get_backends()
        wanted = set(backends) if backends is not None else set(order)
        for name in wanted:
            self._instance(name)  # raise UnknownBackend before draining
        events = [
            (name, self._instance(name).record_event())
            for name in order
            if name in wanted
        ]
        errors: list[BaseException] = []
        for name, event in events:
            if not event.wait(self.timeout * 2 + 5.0):
                errors.append(
                    PendingAfterTimeout(f"backend {name!r} did not drain in time")
                )
                continue
            errors.extend(self._instance(name).drain_errors())
        if errors:
            first = errors[0]
            first.aggregated = errors  # type: ignore[attr-defined]
            raise first

    # -- Listing-style operation surface ------------------------------------

    def send(self, backend: str, buffer: Buffer, peer: int, async_op: bool = False):
        return self.post(
            CommRequest(CommOpKind.send, input=buffer, root=peer,
                        backend=backend, async_op=async_op)
        )

    def recv(self, backend: str, buffer: Buffer, peer: int, async_op: bool = False):
        return self.post(
            CommRequest(CommOpKind.recv, output=buffer, root=peer,
                        backend=backend, async_op=async_op)
        )

    def all_reduce(
        self, backend: str, buffer: Buffer,
        op: ReduceOp = ReduceOp.sum, async_op: bool = False,
    ):
        return self.post(
            CommRequest(CommOpKind.all_reduce, input=buffer, output=buffer,
                        op=op, backend=backend, async_op=async_op)
        )

    def reduce(
        self, backend: str, buffer: Buffer, root: int,
        op: ReduceOp = ReduceOp.sum, async_op: bool = False,
    ):
        return self.post(
            CommRequest(CommOpKind.reduce, input=buffer, output=buffer,
                        root=root, op=op, backend=backend, async_op=async_op)
        )

    def bcast(self, backend: str, buffer: Buffer, root: int, async_op: bool = False):
        return self.post(
            CommRequest(CommOpKind.bcast, output=buffer, root=root,
                        backend=backend, async_op=async_op)
        )

    def all_gather(
        self, backend: str, output: Buffer, input: Buffer, async_op: bool = False
    ):
        return self.post(
            CommRequest(CommOpKind.all_gather, input=input, output=output,
                        backend=backend, async_op=async_op)
        )

    def all_gatherv(
        self, backend: str, output: Buffer, input: Buffer,
        rcounts: list[int], displs: list[int], async_op: bool = False,
    ):
        return self.post(
            CommRequest(CommOpKind.all_gatherv, input=input, output=output,
                        rcounts=rcounts, rdispls=displs,
                        backend=backend, async_op=async_op)
        )

    def gather(
        self, backend: str, output: Optional[Buffer], input: Buffer, root: int,
        async_op: bool = False,
    ):
        return self.post(
            CommRequest(CommOpKind.gather, input=input, output=output, root=root,
                        backend=backend, async_op=async_op)
        )

    def gatherv(
        self, backend: str, output: Optional[Buffer], input: Buffer, root: int,
        rcounts: list[int], displs: list[int], async_op: bool = False,
    ):
        return self.post(
            CommRequest(CommOpKind.gatherv, input=input, output=output, root=root,
                        rcounts=rcounts, rdispls=displs,
                        backend=backend, async_op=async_op)
        )

    def scatter(
        self, backend: str, output: Buffer, input: Optional[Buffer], root: int,
        async_op: bool = False,
    ):
        return self.post(
            CommRequest(CommOpKind.scatter, input=input, output=output, root=root,
                        backend=backend, async_op=async_op)
        )

    def scatterv(
        self, backend: str, output: Buffer, input: Optional[Buffer], root: int,
        scounts: list[int], displs: list[int], async_op: bool = False,
    ):
        return self.post(
            CommRequest(CommOpKind.scatterv, input=input, output=output, root=root,
                        scounts=scounts, sdispls=displs,
                        backend=backend, async_op=async_op)
        )

    def reduce_scatter(
        self, backend: str, output: Buffer, input: Buffer,
        op: ReduceOp = ReduceOp.sum, async_op: bool = False,
    ):
        return self.post(
            CommRequest(CommOpKind.reduce_scatter, input=input, output=output,
                        op=op, backend=backend, async_op=async_op)
        )

    def all_to_all_single(
        self, backend: str, output: Buffer, input: Buffer, async_op: bool = False
    ):
        return self.post(
            CommRequest(CommOpKind.all_to_all_single, input=input, output=output,
                        backend=backend, async_op=async_op)
        )

    def all_to_all(
        self, backend: str, outputs: Sequence[Buffer], inputs: Sequence[Buffer],
        async_op: bool = False,
    ):
        return self.post(
            CommRequest(CommOpKind.all_to_all, input=list(inputs),
                        output=list(outputs), backend=backend, async_op=async_op)
        )

    def all_to_allv(
        self, backend: str, output: Buffer, input: Buffer,
        scounts: list[int], rcounts: list[int],
        sdispls: list[int], rdispls: list[int], async_op: bool = False,
    ):
        return self.post(
            CommRequest(CommOpKind.all_to_allv, input=input, output=output,
                        scounts=scounts, rcounts=rcounts,
                        sdispls=sdispls, rdispls=rdispls,
                        backend=backend, async_op=async_op)
        )
