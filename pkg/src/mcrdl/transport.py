"""Point-to-point byte movement between ranks over pluggable channels.

Two concrete transports: "inproc" (ranks are threads sharing a fabric of
queues) and "tcp" (real sockets, one connection per directed pair, created
lazily). Every transport delivers frames in FIFO order per (src, dst) pair
and performs all blocking I/O on behalf of a single progress lane.

Wire format (bit-exact, little-endian):

    magic   4 bytes  "MCDL"
    version u8       1
    kind    u8       0 = p2p payload, 1 = collective header, 2 = bootstrap
    seq     u64
    len     u64      payload byte length
    payload len bytes

A :class:`ShapedTransport` wraps any transport and stretches each payload
message's end-to-end time to at least alpha + beta * nbytes, which is what
gives otherwise-identical backends distinct performance profiles. Control
frames (headers, bootstrap) are not shaped: the model covers data
transfer, not bookkeeping.
"""

from __future__ import annotations

import collections
import json
import socket
import struct
import threading
import time
import uuid
from dataclasses import dataclass
from typing import NamedTuple, Optional

from .errors import (
    AddressInUse,
    BootstrapTimeout,
    CommTimeout,
    InvalidDestination,
    LengthMismatch,
    PeerDisconnected,
    ValidationError,
)

FRAME_MAGIC = b"MCDL"
FRAME_VERSION = 1
KIND_P2P = 0
KIND_HEADER = 1
KIND_BOOTSTRAP = 2
_FRAME_HEADER = struct.Struct("<4sBBQQ")
FRAME_HEADER_LEN = _FRAME_HEADER.size  # 22


class Frame(NamedTuple):
    kind: int
    seq: int
    payload: bytes
    arrival: float  # monotonic receive timestamp, 0.0 before delivery


def pack_frame(kind: int, seq: int, payload: bytes) -> bytes:
    return _FRAME_HEADER.pack(FRAME_MAGIC, FRAME_VERSION, kind, seq, len(payload)) + payload


def unpack_frame_header(raw: bytes) -> tuple[int, int, int]:
    """Returns (kind, seq, payload_len); raises on bad magic/version."""
    magic, version, kind, seq, payload_len = _FRAME_HEADER.unpack(raw)
    if magic != FRAME_MAGIC:
        raise LengthMismatch(f"bad frame magic {magic!r}")
    if version != FRAME_VERSION:
        raise LengthMismatch(f"unsupported frame version {version}")
    return kind, seq, payload_len


@dataclass(frozen=True)
class Endpoint:
    rank: int
    address: str  # "host:port" for tcp, "inproc:<fabric>/<rank>" for inproc


@dataclass(frozen=True)
class CostShape:
    """Modeled message cost: alpha seconds per message plus beta seconds
    per payload byte."""

    alpha: float
    beta: float

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValidationError("shape", "alpha and beta must be >= 0")

    def delay(self, nbytes: int) -> float:
        return self.alpha + self.beta * nbytes


class RankAddressBook:
    """World membership: one endpoint per rank, identical on every rank."""

    def __init__(self, world_size: int, endpoints: list[Endpoint]):
        if len(endpoints) != world_size:
            raise ValidationError("endpoints", f"expected {world_size} endpoints")
        self.world_size = world_size
        self.endpoints = sorted(endpoints, key=lambda e: e.rank)

    def to_json(self) -> str:
        return json.dumps(
            {
                "world_size": self.world_size,
                "endpoints": [
                    {"rank": e.rank, "address": e.address} for e in self.endpoints
                ],
            },
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, raw: str) -> "RankAddressBook":
        doc = json.loads(raw)
        return cls(
            doc["world_size"],
            [Endpoint(e["rank"], e["address"]) for e in doc["endpoints"]],
        )

    def __eq__(self, other) -> bool:
        return isinstance(other, RankAddressBook) and self.to_json() == other.to_json()


class _Inbox:
    """FIFO frame queue for one (src, dst) direction."""

    def __init__(self):
        self._frames: collections.deque[Frame] = collections.deque()
        self._cond = threading.Condition()
        self._closed = False
        self._close_reason = ""

    def put(self, kind: int, seq: int, payload: bytes) -> None:
        frame = Frame(kind, seq, payload, time.monotonic())
        with self._cond:
            self._frames.append(frame)
            self._cond.notify_all()

    def close(self, reason: str = "peer closed connection") -> None:
        with self._cond:
            self._closed = True
            self._close_reason = reason
            self._cond.notify_all()

    def pop(self, deadline: Optional[float]) -> Frame:
        with self._cond:
            while not self._frames:
                if self._closed:
                    raise PeerDisconnected(self._close_reason)
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise CommTimeout("timed out waiting for frame")
                self._cond.wait(remaining)
            return self._frames.popleft()

    def __len__(self) -> int:
        with self._cond:
            return len(self._frames)


class Transport:
    """Interface shared by all transports."""

    rank: int
    world_size: int
    book: RankAddressBook

    def send(self, dst: int, payload: bytes, kind: int = KIND_P2P, seq: int = 0) -> None:
        raise NotImplementedError

    def recv(self, src: int, deadline: Optional[float] = None) -> Frame:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def _check_peer(self, peer: int) -> None:
        if peer == self.rank:
            raise InvalidDestination("peer must differ from own rank")
        if not 0 <= peer < self.world_size:
            raise InvalidDestination(f"rank {peer} outside world {self.world_size}")


class InprocFabric:
    """Queue fabric shared by thread-ranks of one process. Queues are keyed
    by (channel, src, dst) so multiple backends coexist independently."""

    def __init__(self, world_size: int):
        self.world_size = world_size
        self.id = uuid.uuid4().hex[:8]
        self._queues: dict[tuple[str, int, int], _Inbox] = {}
        self._lock = threading.Lock()

    def queue(self, channel: str, src: int, dst: int) -> _Inbox:
        key = (channel, src, dst)
        with self._lock:
            q = self._queues.get(key)
            if q is None:
                q = self._queues[key] = _Inbox()
            return q

    def transport(self, channel: str, rank: int) -> "InprocTransport":
        return InprocTransport(self, channel, rank)

    def book(self, channel: str) -> RankAddressBook:
        return RankAddressBook(
            self.world_size,
            [
                Endpoint(r, f"inproc:{self.id}/{channel}/{r}")
                for r in range(self.world_size)
            ],
        )


class InprocTransport(Transport):
    def __init__(self, fabric: InprocFabric, channel: str, rank: int):
        self.fabric = fabric
        self.channel = channel
        self.rank = rank
        self.world_size = fabric.world_size
        self.book = fabric.book(channel)

    def send(self, dst: int, payload: bytes, kind: int = KIND_P2P, seq: int = 0) -> None:
        self._check_peer(dst)
        self.fabric.queue(self.channel, self.rank, dst).put(kind, seq, payload)

    def recv(self, src: int, deadline: Optional[float] = None) -> Frame:
        self._check_peer(src)
        return self.fabric.queue(self.channel, src, self.rank).pop(deadline)


def parse_hostport(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ValidationError("address", f"expected host:port, got {address!r}")
    return host, int(port)


def free_port(host: str = "127.0.0.1") -> int:
    with socket.socket() as s:
        s.bind((host, 0))
        return s.getsockname()[1]


def _recv_exact(sock: socket.socket, n: int, deadline: Optional[float]) -> bytes:
    chunks = []
    got = 0
    while got < n:
        if deadline is not None:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise CommTimeout("socket read timed out")
            sock.settimeout(remaining)
        try:
            chunk = sock.recv(min(n - got, 1 << 20))
        except socket.timeout:
            raise CommTimeout("socket read timed out") from None
        if not chunk:
            raise PeerDisconnected("connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def _read_frame(sock: socket.socket, deadline: Optional[float]) -> tuple[int, int, bytes]:
    head = _recv_exact(sock, FRAME_HEADER_LEN, deadline)
    kind, seq, payload_len = unpack_frame_header(head)
    payload = _recv_exact(sock, payload_len, deadline) if payload_len else b""
    return kind, seq, payload


def _bootstrap_with_listener(
    rank: int,
    world_size: int,
    master_addr: str,
    master_port: int,
    data_host: str,
    data_port: int,
    timeout: float,
    master_listener: Optional[socket.socket] = None,
) -> RankAddressBook:
    """Star rendezvous: every rank (including 0) reports its data endpoint
    to the rank-0 listener, which broadcasts the completed book back."""
    if not 0 <= rank < world_size:
        raise ValidationError("rank", f"rank {rank} outside world {world_size}")
    deadline = time.monotonic() + timeout

    collector = None
    if rank == 0:
        if master_listener is not None:
            collector = master_listener
        else:
            collector = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            collector.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            try:
                collector.bind((master_addr, master_port))
            except OSError as exc:
                collector.close()
                raise AddressInUse(f"{master_addr}:{master_port}: {exc}") from None
        collector.listen(world_size + 8)
        collector.settimeout(0.2)

    hello = json.dumps({"rank": rank, "host": data_host, "port": data_port}).encode()

    # Everyone (rank 0 included) dials the master; retry until it is up.
    conn = None
    while conn is None:
        try:
            conn = socket.create_connection((master_addr, master_port), timeout=1.0)
        except OSError:
            if time.monotonic() > deadline:
                if collector is not None:
                    collector.close()
                raise BootstrapTimeout(
                    f"master {master_addr}:{master_port} unreachable after {timeout}s"
                ) from None
            time.sleep(0.05)
    conn.sendall(pack_frame(KIND_BOOTSTRAP, rank, hello))

    if rank == 0:
        peers: list[socket.socket] = []
        endpoints: list[Endpoint] = []
        seen: set[int] = set()
        try:
            while len(seen) < world_size:
                if time.monotonic() > deadline:
                    raise BootstrapTimeout(
                        f"only {len(seen)}/{world_size} ranks reported in {timeout}s"
                    )
                try:
                    peer, _ = collector.accept()
                except socket.timeout:
                    continue
                _, _, payload = _read_frame(peer, deadline)
                doc = json.loads(payload)
                if doc["rank"] in seen:
                    raise ValidationError("rank", f"rank {doc['rank']} reported twice")
                seen.add(doc["rank"])
                endpoints.append(Endpoint(doc["rank"], f"{doc['host']}:{doc['port']}"))
                peers.append(peer)
            book = RankAddressBook(world_size, endpoints)
            raw = book.to_json().encode()
            for peer in peers:
                peer.sendall(pack_frame(KIND_BOOTSTRAP, 0, raw))
        finally:
            for peer in peers:
                peer.close()
            collector.close()

    _, _, payload = _read_frame(conn, deadline)
    conn.close()
    return RankAddressBook.from_json(payload.decode())


def bootstrap(
    rank: int, world_size: int, master_address: str, *, timeout: float = 30.0
) -> RankAddressBook:
    """Run the rendezvous and return the world's address book. The data
    endpoint registered for this rank is a throwaway listener; use
    :class:`TcpTransport` for a live world."""
    host, port = parse_hostport(master_address)
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    try:
        return _bootstrap_with_listener(
            rank, world_size, host, port, "127.0.0.1", probe.getsockname()[1], timeout
        )
    finally:
        probe.close()


class TcpTransport(Transport):
    """Sockets transport. One lazily-dialed connection per directed pair;
    a reader thread per inbound peer drains frames into per-source queues
    so matched communication patterns can never deadlock on kernel
    buffers."""

    CONNECT_RETRIES = 10
    CONNECT_BACKOFF = 0.1

    def __init__(
        self,
        rank: int,
        world_size: int,
        master_addr: str,
        master_port: int,
        *,
        listen_host: str = "127.0.0.1",
        timeout: float = 30.0,
        master_listener: Optional[socket.socket] = None,
    ):
        self.rank = rank
        self.world_size = world_size
        self._closing = False
        self._inboxes = {src: _Inbox() for src in range(world_size) if src != rank}
        self._out: dict[int, socket.socket] = {}
        self._out_lock = threading.Lock()
        self._threads: list[threading.Thread] = []

        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((listen_host, 0))
        self._listener.listen(world_size + 8)
        self._listener.settimeout(0.2)
        data_port = self._listener.getsockname()[1]

        self.book = _bootstrap_with_listener(
            rank, world_size, master_addr, master_port, listen_host, data_port,
            timeout, master_listener,
        )

        acceptor = threading.Thread(
            target=self._accept_loop, name=f"tcp-accept-r{rank}", daemon=True
        )
        acceptor.start()
        self._threads.append(acceptor)

    def _accept_loop(self) -> None:
        while not self._closing:
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            try:
                _, _, payload = _read_frame(conn, time.monotonic() + 10.0)
                src = json.loads(payload)["rank"]
            except Exception:
                conn.close()
                continue
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            reader = threading.Thread(
                target=self._read_loop,
                args=(conn, src),
                name=f"tcp-read-r{self.rank}-from{src}",
                daemon=True,
            )
            reader.start()
            self._threads.append(reader)

    def _read_loop(self, conn: socket.socket, src: int) -> None:
        inbox = self._inboxes[src]
        try:
            while True:
                kind, seq, payload = _read_frame(conn, None)
                inbox.put(kind, seq, payload)
        except (PeerDisconnected, OSError, CommTimeout):
            inbox.close()
        finally:
            conn.close()

    def _dial(self, dst: int) -> socket.socket:
        host, port = parse_hostport(self.book.endpoints[dst].address)
        last_error: Optional[Exception] = None
        for _ in range(self.CONNECT_RETRIES):
            try:
                conn = socket.create_connection((host, port), timeout=5.0)
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                ident = json.dumps({"rank": self.rank}).encode()
                conn.sendall(pack_frame(KIND_BOOTSTRAP, self.rank, ident))
                return conn
            except OSError as exc:
                last_error = exc
                time.sleep(self.CONNECT_BACKOFF)
        raise PeerDisconnected(f"cannot reach rank {dst}: {last_error}")

    def send(self, dst: int, payload: bytes, kind: int = KIND_P2P, seq: int = 0) -> None:
        self._check_peer(dst)
        with self._out_lock:
            conn = self._out.get(dst)
            if conn is None:
                conn = self._out[dst] = self._dial(dst)
            try:
                conn.sendall(pack_frame(kind, seq, payload))
            except OSError as exc:
                raise PeerDisconnected(f"send to rank {dst} failed: {exc}") from None

    def recv(self, src: int, deadline: Optional[float] = None) -> Frame:
        self._check_peer(src)
        return self._inboxes[src].pop(deadline)

    def close(self) -> None:
        self._closing = True
        try:
            self._listener.close()
        except OSError:
            pass
        with self._out_lock:
            for conn in self._out.values():
                try:
                    conn.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                conn.close()
            self._out.clear()
        for inbox in self._inboxes.values():
            inbox.close("transport closed")


def _sleep_until(target: float) -> None:
    """Wait to a monotonic deadline without timer quantization. OS sleeps
    on desk hardware can overshoot by a full scheduler tick (1 ms), which
    would put a cliff between shaped delays that sleep and those that
    don't; instead long waits bulk-sleep and the tail is a zero-sleep
    yield loop, which releases the GIL every iteration and lands within
    a few scheduler slices of the target."""
    while True:
        remaining = target - time.monotonic()
        if remaining <= 0:
            return
        if remaining > 0.005:
            time.sleep(remaining - 0.003)
        else:
            time.sleep(0)


class ShapedTransport(Transport):
    """Stretches each payload message's end-to-end time to at least
    alpha + beta * nbytes beyond the wrapped transport's own time.

    The delay is applied on the receive side from the frame's arrival
    timestamp, so independent messages overlap their modeled delays while
    each (src, dst) link stays serialized and FIFO.
    """

    def __init__(self, inner: Transport, shape: CostShape):
        self.inner = inner
        self.shape = shape
        self.rank = inner.rank
        self.world_size = inner.world_size
        self.book = inner.book
        self._link_free_at: dict[int, float] = {}

    def send(self, dst: int, payload: bytes, kind: int = KIND_P2P, seq: int = 0) -> None:
        self.inner.send(dst, payload, kind=kind, seq=seq)

    def recv(self, src: int, deadline: Optional[float] = None) -> Frame:
        frame = self.inner.recv(src, deadline)
        if frame.kind != KIND_P2P:
            return frame
        due = max(
            self._link_free_at.get(src, 0.0),
            frame.arrival + self.shape.delay(len(frame.payload)),
        )
        self._link_free_at[src] = due
        _sleep_until(due)
        return frame

    def close(self) -> None:
        self.inner.close()
