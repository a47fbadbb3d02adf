"""Collective semantics and algorithms, built over transport point-to-point.

Every collective runs entirely on its backend's progress lane. Execution
has two phases:

1. Header agreement: each rank sends a signature of the posted operation
   (kind, seq, dtype, counts, root, reduce op, codec) to rank 0, which
   cross-checks all signatures and broadcasts a verdict. Mismatched
   posting orders therefore surface as OrderMismatch on every rank before
   any payload moves, instead of deadlocking or corrupting streams.
2. The selected algorithm exchanges payload frames.

Zero-length segments never produce payload frames; both sides of a pair
compute segment sizes from the same request fields, so skipping is
symmetric.
"""

from __future__ import annotations

import json
import math
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Buffer, CommOpKind, CommRequest, DType, VECTORED_KINDS
from .errors import (
    CodecMismatch,
    LengthMismatch,
    OrderMismatch,
    UnsupportedOperation,
    ValidationError,
)
from .transport import KIND_HEADER, KIND_P2P, Transport

ALGORITHMS: dict[CommOpKind, tuple[str, ...]] = {
    CommOpKind.all_reduce: ("ring", "recursive_doubling", "naive"),
    CommOpKind.reduce: ("binomial_tree", "linear"),
    CommOpKind.bcast: ("binomial_tree", "linear"),
    CommOpKind.all_gather: ("ring", "bruck", "naive"),
    CommOpKind.all_gatherv: ("ring", "bruck", "naive"),
    CommOpKind.gather: ("linear", "binomial_tree"),
    CommOpKind.gatherv: ("linear",),
    CommOpKind.scatter: ("linear", "binomial_tree"),
    CommOpKind.scatterv: ("linear",),
    CommOpKind.reduce_scatter: ("ring", "naive"),
    CommOpKind.all_to_all_single: ("pairwise_exchange", "bruck", "naive"),
    CommOpKind.all_to_all: ("pairwise_exchange", "bruck", "naive"),
    CommOpKind.all_to_allv: ("pairwise_exchange", "naive"),
    CommOpKind.send: ("direct",),
    CommOpKind.recv: ("direct",),
}

DEFAULT_ALGORITHMS: dict[CommOpKind, str] = {
    kind: names[0] for kind, names in ALGORITHMS.items()
}

# The "naive" policy maps every kind to its simplest linear/naive variant.
# All of these reduce in ascending rank order, so results are bit-identical
# to a sequential fold; this is also the family foreign peers implement.
NAIVE_ALGORITHMS: dict[CommOpKind, str] = {
    CommOpKind.all_reduce: "naive",
    CommOpKind.reduce: "linear",
    CommOpKind.bcast: "linear",
    CommOpKind.all_gather: "naive",
    CommOpKind.all_gatherv: "naive",
    CommOpKind.gather: "linear",
    CommOpKind.gatherv: "linear",
    CommOpKind.scatter: "linear",
    CommOpKind.scatterv: "linear",
    CommOpKind.reduce_scatter: "naive",
    CommOpKind.all_to_all_single: "naive",
    CommOpKind.all_to_all: "naive",
    CommOpKind.all_to_allv: "naive",
    CommOpKind.send: "direct",
    CommOpKind.recv: "direct",
}


class AlgorithmPolicy:
    """Per-kind algorithm selection for one backend. Every kind maps to
    exactly one algorithm; kinds may be disabled to model partial backends
    (the tuner records those combinations as skipped)."""

    def __init__(
        self,
        overrides: Optional[dict] = None,
        *,
        base: Optional[dict[CommOpKind, str]] = None,
        disabled: Sequence[CommOpKind] = (),
    ):
        self._table = dict(base if base is not None else DEFAULT_ALGORITHMS)
        for kind, name in (overrides or {}).items():
            kind = CommOpKind(kind) if isinstance(kind, str) else kind
            if name not in ALGORITHMS[kind]:
                raise ValidationError(
                    "policy", f"{name!r} is not an algorithm for {kind.name}"
                )
            self._table[kind] = name
        self._disabled = frozenset(
            CommOpKind(k) if isinstance(k, str) else k for k in disabled
        )

    @classmethod
    def naive(cls, overrides: Optional[dict] = None) -> "AlgorithmPolicy":
        return cls(overrides, base=NAIVE_ALGORITHMS)

    def supports(self, kind: CommOpKind) -> bool:
        return kind not in self._disabled

    def algorithm(self, kind: CommOpKind) -> str:
        if kind in self._disabled:
            raise UnsupportedOperation(f"{kind.name} disabled on this backend")
        return self._table[kind]


class Comm:
    """Point-to-point helper bound to one collective execution: applies the
    op's seq to frames, the deadline to receives, and the payload codec
    (when one is active) to blocks."""

    def __init__(
        self,
        transport: Transport,
        seq: int,
        deadline: Optional[float],
        codec=None,
    ):
        self.transport = transport
        self.seq = seq
        self.deadline = deadline
        self.codec = codec

    def send_block(self, dst: int, arr: np.ndarray) -> None:
        if arr.size == 0:
            return
        payload = self.codec.encode(arr) if self.codec else arr.tobytes()
        self.transport.send(dst, payload, kind=KIND_P2P, seq=self.seq)

    def recv_block(self, src: int, count: int, dtype: DType) -> np.ndarray:
        if count == 0:
            return np.empty(0, dtype=dtype.np_dtype)
        frame = self.transport.recv(src, self.deadline)
        if frame.kind != KIND_P2P:
            raise OrderMismatch(
                f"expected payload frame from rank {src}, got kind {frame.kind}"
            )
        if self.codec:
            expected = self.codec.wire_nbytes(count)
            if len(frame.payload) != expected:
                raise LengthMismatch(
                    f"expected {expected} compressed bytes, got {len(frame.payload)}"
                )
            return self.codec.decode(frame.payload, count)
        expected = count * dtype.size_bytes
        if len(frame.payload) != expected:
            raise LengthMismatch(
                f"expected {expected} bytes from rank {src}, got {len(frame.payload)}"
            )
        return np.frombuffer(frame.payload, dtype=dtype.np_dtype)


def even_segments(count: int, parts: int) -> tuple[list[int], list[int]]:
    """Ceil/floor split: the first (count mod parts) segments are one
    element larger. Returns (sizes, offsets)."""
    base, extra = divmod(count, parts)
    sizes = [base + 1 if i < extra else base for i in range(parts)]
    offsets = [0] * parts
    for i in range(1, parts):
        offsets[i] = offsets[i - 1] + sizes[i - 1]
    return sizes, offsets


# --------------------------------------------------------------------------
# Header agreement


def _request_signature(request: CommRequest, codec_id: Optional[str]) -> dict:
    sig: dict = {
        "op": request.kind.value,
        "seq": request.seq,
        "codec": codec_id,
    }
    bufs = request.buffers()
    sig["dtype"] = bufs[0].dtype.name if bufs else None
    if request.root is not None:
        sig["root"] = request.root
    if request.op is not None:
        sig["rop"] = request.op.value
    kind = request.kind
    if kind in (CommOpKind.gatherv, CommOpKind.all_gatherv):
        sig["counts"] = list(request.rcounts)
    elif kind is CommOpKind.scatterv:
        sig["counts"] = list(request.scounts)
    elif kind is CommOpKind.all_to_allv:
        sig["scounts"] = list(request.scounts)
        sig["rcounts"] = list(request.rcounts)
    elif kind is CommOpKind.all_to_all:
        sig["scounts"] = [b.count for b in request.input]
        sig["rcounts"] = [b.count for b in request.output]
    elif kind in (
        CommOpKind.reduce,
        CommOpKind.all_reduce,
        CommOpKind.all_gather,
        CommOpKind.gather,
        CommOpKind.all_to_all_single,
    ):
        # Per-rank share, which every rank knows regardless of root role.
        sig["count"] = request.input.count
    elif kind in (CommOpKind.bcast, CommOpKind.scatter, CommOpKind.reduce_scatter):
        sig["count"] = request.output.count
    return sig


def _cross_check(signatures: list[dict], p: int) -> Optional[tuple[str, str]]:
    """Compare all ranks' signatures; returns (code, message) on mismatch."""
    base = signatures[0]
    for field in ("op", "seq", "dtype", "root", "rop", "count", "counts"):
        values = [sig.get(field) for sig in signatures]
        if any(v != values[0] for v in values):
            return (
                "order",
                f"ranks disagree on {field}: "
                + ", ".join(f"r{i}={v!r}" for i, v in enumerate(values)),
            )
    codecs = [sig.get("codec") for sig in signatures]
    if any(c != codecs[0] for c in codecs):
        return ("codec", f"ranks disagree on codec: {codecs}")
    if "scounts" in base:
        scounts = [sig["scounts"] for sig in signatures]
        rcounts = [sig["rcounts"] for sig in signatures]
        if any(len(row) != p for row in scounts + rcounts):
            return ("order", "count vectors have wrong length")
        for i in range(p):
            for j in range(p):
                if scounts[i][j] != rcounts[j][i]:
                    return (
                        "order",
                        f"pairwise count disagreement: rank {i} sends "
                        f"{scounts[i][j]} to rank {j}, which expects {rcounts[j][i]}",
                    )
    return None


def _agree_header(
    comm: Comm, rank: int, p: int, request: CommRequest, codec_id: Optional[str]
) -> None:
    if p == 1:
        return
    transport = comm.transport
    sig = _request_signature(request, codec_id)
    raw = json.dumps(sig, sort_keys=True, separators=(",", ":")).encode()
    if rank != 0:
        transport.send(0, raw, kind=KIND_HEADER, seq=request.seq)
        frame = transport.recv(0, comm.deadline)
        if frame.kind != KIND_HEADER:
            raise OrderMismatch(
                f"expected verdict frame from rank 0, got kind {frame.kind}"
            )
        verdict = json.loads(frame.payload)
    else:
        signatures = [sig]
        failure: Optional[tuple[str, str]] = None
        for src in range(1, p):
            frame = transport.recv(src, comm.deadline)
            if frame.kind != KIND_HEADER:
                failure = failure or (
                    "order",
                    f"expected header frame from rank {src}, got kind {frame.kind}",
                )
                signatures.append({})
                continue
            signatures.append(json.loads(frame.payload))
        failure = failure or _cross_check(signatures, p)
        verdict = (
            {"ok": True}
            if failure is None
            else {"ok": False, "code": failure[0], "error": failure[1]}
        )
        raw_verdict = json.dumps(verdict, sort_keys=True).encode()
        for dst in range(1, p):
            transport.send(dst, raw_verdict, kind=KIND_HEADER, seq=request.seq)
    if not verdict["ok"]:
        exc = CodecMismatch if verdict.get("code") == "codec" else OrderMismatch
        raise exc(verdict["error"])


# --------------------------------------------------------------------------
# Algorithms. Each takes (comm, rank, p, request) and fills output buffers.


def _arr(buf: Buffer) -> np.ndarray:
    return buf.array


def _allreduce_naive(comm: Comm, rank: int, p: int, req: CommRequest) -> None:
    inp, out, op = _arr(req.input), _arr(req.output), req.op
    dt = req.input.dtype
    n = inp.shape[0]
    if p == 1:
        out[:] = inp
        return
    if rank == 0:
        acc = inp.copy()
        for src in range(1, p):
            acc = op.apply(acc, comm.recv_block(src, n, dt))
        out[:] = acc
        for dst in range(1, p):
            comm.send_block(dst, acc)
    else:
        comm.send_block(0, inp)
        out[:] = comm.recv_block(0, n, dt)


def _allreduce_recursive_doubling(comm: Comm, rank: int, p: int, req: CommRequest) -> None:
    inp, out, op = _arr(req.input), _arr(req.output), req.op
    dt = req.input.dtype
    n = inp.shape[0]
    acc = inp.copy()
    q = 1 << (p.bit_length() - 1)  # largest power of two <= p
    excess = p - q

    # Fold the excess ranks into the nearest lower power of two.
    my_id: Optional[int] = None
    if rank < 2 * excess:
        if rank % 2 == 1:
            comm.send_block(rank - 1, acc)
        else:
            acc = op.apply(acc, comm.recv_block(rank + 1, n, dt))
            my_id = rank // 2
    else:
        my_id = rank - excess

    if my_id is not None:

        def id_to_rank(vid: int) -> int:
            return 2 * vid if vid < excess else vid + excess

        k = 1
        while k < q:
            partner = id_to_rank(my_id ^ k)
            comm.send_block(partner, acc)
            other = comm.recv_block(partner, n, dt)
            acc = op.apply(acc, other) if my_id < (my_id ^ k) else op.apply(other, acc)
            k <<= 1

    if rank < 2 * excess:
        if rank % 2 == 1:
            acc = comm.recv_block(rank - 1, n, dt)
        else:
            comm.send_block(rank + 1, acc)
    out[:] = acc


def _allreduce_ring(comm: Comm, rank: int, p: int, req: CommRequest) -> None:
    inp, out, op = _arr(req.input), _arr(req.output), req.op
    dt = req.input.dtype
    n = inp.shape[0]
    if p == 1:
        out[:] = inp
        return
    work = inp.copy()
    sizes, offs = even_segments(n, p)
    right, left = (rank + 1) % p, (rank - 1) % p

    def seg(i: int) -> np.ndarray:
        i %= p
        return work[offs[i] : offs[i] + sizes[i]]

    # Reduce-scatter pass: partials circulate; rank r ends owning segment r.
    for s in range(p - 1):
        send_i, recv_i = (rank - 1 - s) % p, (rank - 2 - s) % p
        comm.send_block(right, seg(send_i))
        incoming = comm.recv_block(left, sizes[recv_i], dt)
        target = seg(recv_i)
        target[:] = op.apply(incoming, target)
    # All-gather pass: reduced segments circulate.
    for s in range(p - 1):
        send_i, recv_i = (rank - s) % p, (rank - 1 - s) % p
        comm.send_block(right, seg(send_i))
        seg(recv_i)[:] = comm.recv_block(left, sizes[recv_i], dt)
    out[:] = work


def _reduce_linear(comm: Comm, rank: int, p: int, req: CommRequest) -> None:
    inp, op, root = _arr(req.input), req.op, req.root
    dt = req.input.dtype
    n = inp.shape[0]
    if rank != root:
        comm.send_block(root, inp)
        return
    acc = None
    for src in range(p):
        contrib = inp if src == rank else comm.recv_block(src, n, dt)
        acc = contrib.copy() if acc is None else op.apply(acc, contrib)
    _arr(req.output)[:] = acc


def _reduce_binomial(comm: Comm, rank: int, p: int, req: CommRequest) -> None:
    inp, op, root = _arr(req.input), req.op, req.root
    dt = req.input.dtype
    n = inp.shape[0]
    vr = (rank - root) % p
    acc = inp.copy()
    mask = 1
    while mask < p:
        if vr & mask:
            comm.send_block((vr - mask + root) % p, acc)
            break
        child = vr + mask
        if child < p:
            acc = op.apply(acc, comm.recv_block((child + root) % p, n, dt))
        mask <<= 1
    if rank == root:
        _arr(req.output)[:] = acc


def _bcast_linear(comm: Comm, rank: int, p: int, req: CommRequest) -> None:
    arr, root = _arr(req.output), req.root
    if rank == root:
        for dst in range(p):
            if dst != rank:
                comm.send_block(dst, arr)
    else:
        arr[:] = comm.recv_block(root, arr.shape[0], req.output.dtype)


def _bcast_binomial(comm: Comm, rank: int, p: int, req: CommRequest) -> None:
    arr, root = _arr(req.output), req.root
    dt = req.output.dtype
    n = arr.shape[0]
    vr = (rank - root) % p
    mask = 1
    while mask < p:
        if vr & mask:
            arr[:] = comm.recv_block((vr - mask + root) % p, n, dt)
            break
        mask <<= 1
    mask >>= 1
    while mask > 0:
        if vr + mask < p:
            comm.send_block((vr + mask + root) % p, arr)
        mask >>= 1


def _gather_counts(req: CommRequest, p: int) -> tuple[list[int], list[int]]:
    if req.kind in VECTORED_KINDS:
        counts = list(req.rcounts if req.rcounts is not None else req.scounts)
        displs = list(req.rdispls if req.rdispls is not None else req.sdispls)
    else:
        side = req.input if isinstance(req.input, Buffer) else req.output
        n = side.count if req.kind in (CommOpKind.all_gather, CommOpKind.gather) else None
        if req.kind is CommOpKind.scatter:
            n = req.output.count
        counts = [n] * p
        displs = [i * n for i in range(p)]
    return counts, displs


def _allgather_ring(comm: Comm, rank: int, p: int, req: CommRequest) -> None:
    inp, out = _arr(req.input), _arr(req.output)
    dt = req.input.dtype
    counts, displs = _gather_counts(req, p)

    def seg(j: int) -> np.ndarray:
        j %= p
        return out[displs[j] : displs[j] + counts[j]]

    seg(rank)[:] = inp
    if p == 1:
        return
    right, left = (rank + 1) % p, (rank - 1) % p
    for s in range(p - 1):
        send_j, recv_j = (rank - s) % p, (rank - 1 - s) % p
        comm.send_block(right, seg(send_j))
        seg(recv_j)[:] = comm.recv_block(left, counts[recv_j % p], dt)


def _allgather_bruck(comm: Comm, rank: int, p: int, req: CommRequest) -> None:
    counts, _ = _gather_counts(req, p)
    if len(set(counts)) > 1:
        _allgather_ring(comm, rank, p, req)
        return
    inp, out = _arr(req.input), _arr(req.output)
    dt = req.input.dtype
    n = counts[0]
    blocks = [inp.copy()]
    while len(blocks) < p:
        c = min(len(blocks), p - len(blocks))
        d = len(blocks)
        comm.send_block((rank - d) % p, np.concatenate(blocks[:c]) if n else blocks[0])
        data = comm.recv_block((rank + d) % p, c * n, dt)
        blocks.extend(data[t * n : (t + 1) * n] for t in range(c))
    counts2, displs = _gather_counts(req, p)
    for i, block in enumerate(blocks):
        j = (rank + i) % p
        out[displs[j] : displs[j] + counts2[j]] = block


def _allgather_naive(comm: Comm, rank: int, p: int, req: CommRequest) -> None:
    inp, out = _arr(req.input), _arr(req.output)
    dt = req.input.dtype
    counts, displs = _gather_counts(req, p)
    for dst in range(p):
        if dst != rank:
            comm.send_block(dst, inp)
    out[displs[rank] : displs[rank] + counts[rank]] = inp
    for src in range(p):
        if src != rank:
            out[displs[src] : displs[src] + counts[src]] = comm.recv_block(
                src, counts[src], dt
            )


def _gather_linear(comm: Comm, rank: int, p: int, req: CommRequest) -> None:
    inp, root = _arr(req.input), req.root
    dt = req.input.dtype
    counts, displs = _gather_counts(req, p)
    if rank != root:
        comm.send_block(root, inp)
        return
    out = _arr(req.output)
    for src in range(p):
        block = inp if src == rank else comm.recv_block(src, counts[src], dt)
        out[displs[src] : displs[src] + counts[src]] = block


def _gather_binomial(comm: Comm, rank: int, p: int, req: CommRequest) -> None:
    inp, root = _arr(req.input), req.root
    dt = req.input.dtype
    n = inp.shape[0]
    vr = (rank - root) % p
    batch: dict[int, np.ndarray] = {vr: inp.copy()}
    mask = 1
    while mask < p:
        if vr & mask:
            parent = (vr - mask + root) % p
            vrs = sorted(batch)
            if n:
                comm.send_block(parent, np.concatenate([batch[v] for v in vrs]))
            return
        child = vr + mask
        if child < p:
            sub = range(child, min(child + mask, p))
            data = comm.recv_block((child + root) % p, len(sub) * n, dt)
            for idx, v in enumerate(sub):
                batch[v] = data[idx * n : (idx + 1) * n]
        mask <<= 1
    out = _arr(req.output)
    for v, block in batch.items():
        j = (v + root) % p
        out[j * n : (j + 1) * n] = block


def _scatter_linear(comm: Comm, rank: int, p: int, req: CommRequest) -> None:
    out, root = _arr(req.output), req.root
    dt = req.output.dtype
    counts, displs = (
        (list(req.scounts), list(req.sdispls))
        if req.kind is CommOpKind.scatterv
        else ([out.shape[0]] * p, [i * out.shape[0] for i in range(p)])
    )
    if rank == root:
        inp = _arr(req.input)
        for dst in range(p):
            block = inp[displs[dst] : displs[dst] + counts[dst]]
            if dst == rank:
                out[:] = block
            else:
                comm.send_block(dst, block)
    else:
        out[:] = comm.recv_block(root, counts[rank], dt)


def _scatter_binomial(comm: Comm, rank: int, p: int, req: CommRequest) -> None:
    out, root = _arr(req.output), req.root
    dt = req.output.dtype
    n = out.shape[0]
    vr = (rank - root) % p
    batch: dict[int, np.ndarray] = {}
    if vr == 0:
        inp = _arr(req.input)
        for v in range(p):
            j = (v + root) % p
            batch[v] = inp[j * n : (j + 1) * n]
        mask = 1
        while mask * 2 < p:
            mask <<= 1
    else:
        mask = vr & (-vr)
        parent = (vr - mask + root) % p
        sub = range(vr, min(vr + mask, p))
        data = comm.recv_block(parent, len(sub) * n, dt)
        for idx, v in enumerate(sub):
            batch[v] = data[idx * n : (idx + 1) * n]
        mask >>= 1
    while mask > 0:
        child = vr + mask
        if child < p:
            sub = range(child, min(child + mask, p))
            if n:
                comm.send_block(
                    (child + root) % p, np.concatenate([batch[v] for v in sub])
                )
        mask >>= 1
    out[:] = batch[vr]


def _reduce_scatter_ring(comm: Comm, rank: int, p: int, req: CommRequest) -> None:
    inp, out, op = _arr(req.input), _arr(req.output), req.op
    dt = req.input.dtype
    m = out.shape[0]
    if p == 1:
        out[:] = inp
        return
    work = inp.copy()
    right, left = (rank + 1) % p, (rank - 1) % p

    def seg(i: int) -> np.ndarray:
        i %= p
        return work[i * m : (i + 1) * m]

    for s in range(p - 1):
        send_i, recv_i = (rank - 1 - s) % p, (rank - 2 - s) % p
        comm.send_block(right, seg(send_i))
        incoming = comm.recv_block(left, m, dt)
        target = seg(recv_i)
        target[:] = op.apply(incoming, target)
    out[:] = seg(rank)


def _reduce_scatter_naive(comm: Comm, rank: int, p: int, req: CommRequest) -> None:
    inp, out = _arr(req.input), _arr(req.output)
    m = out.shape[0]
    scratch = Buffer.zeros(req.input.dtype, inp.shape[0])
    tmp_req = CommRequest(
        kind=CommOpKind.all_reduce,
        input=req.input,
        output=scratch,
        op=req.op,
        backend=req.backend,
        seq=req.seq,
    )
    _allreduce_naive(comm, rank, p, tmp_req)
    out[:] = scratch.array[rank * m : (rank + 1) * m]


class _BlockView:
    """Uniform accessor over the three all-to-all request forms."""

    def __init__(self, req: CommRequest, p: int):
        self.req = req
        self.p = p
        self._input_snapshot: Optional[np.ndarray] = None
        kind = req.kind
        if kind is CommOpKind.all_to_all_single:
            m = req.input.count // p
            self.scounts = [m] * p
            self.rcounts = [m] * p
            self.sdispls = [i * m for i in range(p)]
            self.rdispls = list(self.sdispls)
            if np.shares_memory(req.input.array, req.output.array):
                self._input_snapshot = req.input.array.copy()
        elif kind is CommOpKind.all_to_allv:
            self.scounts = list(req.scounts)
            self.rcounts = list(req.rcounts)
            self.sdispls = list(req.sdispls)
            self.rdispls = list(req.rdispls)
        else:
            self.scounts = [b.count for b in req.input]
            self.rcounts = [b.count for b in req.output]
            self.sdispls = self.rdispls = None
        self.dtype = req.buffers()[0].dtype

    @property
    def uniform(self) -> bool:
        return len(set(self.scounts) | set(self.rcounts)) == 1

    def in_block(self, j: int) -> np.ndarray:
        if self.sdispls is None:
            return self.req.input[j].array
        src = (
            self._input_snapshot
            if self._input_snapshot is not None
            else self.req.input.array
        )
        return src[self.sdispls[j] : self.sdispls[j] + self.scounts[j]]

    def out_block(self, j: int) -> np.ndarray:
        if self.rdispls is None:
            return self.req.output[j].array
        return self.req.output.array[self.rdispls[j] : self.rdispls[j] + self.rcounts[j]]


def _alltoall_pairwise(comm: Comm, rank: int, p: int, req: CommRequest) -> None:
    view = _BlockView(req, p)
    view.out_block(rank)[:] = view.in_block(rank)
    for step in range(1, p):
        dst, src = (rank + step) % p, (rank - step) % p
        comm.send_block(dst, view.in_block(dst))
        view.out_block(src)[:] = comm.recv_block(src, view.rcounts[src], view.dtype)


def _alltoall_naive(comm: Comm, rank: int, p: int, req: CommRequest) -> None:
    view = _BlockView(req, p)
    for dst in range(p):
        if dst != rank:
            comm.send_block(dst, view.in_block(dst))
    view.out_block(rank)[:] = view.in_block(rank)
    for src in range(p):
        if src != rank:
            view.out_block(src)[:] = comm.recv_block(src, view.rcounts[src], view.dtype)


def _alltoall_bruck(comm: Comm, rank: int, p: int, req: CommRequest) -> None:
    view = _BlockView(req, p)
    if not view.uniform:
        _alltoall_pairwise(comm, rank, p, req)
        return
    m = view.scounts[0]
    blocks = [view.in_block((rank + i) % p).copy() for i in range(p)]
    k = 1
    while k < p:
        idxs = [i for i in range(p) if i & k]
        dst, src = (rank + k) % p, (rank - k) % p
        if m:
            comm.send_block(dst, np.concatenate([blocks[i] for i in idxs]))
        data = comm.recv_block(src, len(idxs) * m, view.dtype)
        for t, i in enumerate(idxs):
            blocks[i] = data[t * m : (t + 1) * m]
        k <<= 1
    for j in range(p):
        view.out_block(j)[:] = blocks[(rank - j) % p]


_IMPLS: dict[tuple[CommOpKind, str], Callable[[Comm, int, int, CommRequest], None]] = {
    (CommOpKind.all_reduce, "naive"): _allreduce_naive,
    (CommOpKind.all_reduce, "recursive_doubling"): _allreduce_recursive_doubling,
    (CommOpKind.all_reduce, "ring"): _allreduce_ring,
    (CommOpKind.reduce, "linear"): _reduce_linear,
    (CommOpKind.reduce, "binomial_tree"): _reduce_binomial,
    (CommOpKind.bcast, "linear"): _bcast_linear,
    (CommOpKind.bcast, "binomial_tree"): _bcast_binomial,
    (CommOpKind.all_gather, "ring"): _allgather_ring,
    (CommOpKind.all_gather, "bruck"): _allgather_bruck,
    (CommOpKind.all_gather, "naive"): _allgather_naive,
    (CommOpKind.all_gatherv, "ring"): _allgather_ring,
    (CommOpKind.all_gatherv, "bruck"): _allgather_bruck,
    (CommOpKind.all_gatherv, "naive"): _allgather_naive,
    (CommOpKind.gather, "linear"): _gather_linear,
    (CommOpKind.gather, "binomial_tree"): _gather_binomial,
    (CommOpKind.gatherv, "linear"): _gather_linear,
    (CommOpKind.scatter, "linear"): _scatter_linear,
    (CommOpKind.scatter, "binomial_tree"): _scatter_binomial,
    (CommOpKind.scatterv, "linear"): _scatter_linear,
    (CommOpKind.reduce_scatter, "ring"): _reduce_scatter_ring,
    (CommOpKind.reduce_scatter, "naive"): _reduce_scatter_naive,
    (CommOpKind.all_to_all_single, "pairwise_exchange"): _alltoall_pairwise,
    (CommOpKind.all_to_all_single, "bruck"): _alltoall_bruck,
    (CommOpKind.all_to_all_single, "naive"): _alltoall_naive,
    (CommOpKind.all_to_all, "pairwise_exchange"): _alltoall_pairwise,
    (CommOpKind.all_to_all, "bruck"): _alltoall_bruck,
    (CommOpKind.all_to_all, "naive"): _alltoall_naive,
    (CommOpKind.all_to_allv, "pairwise_exchange"): _alltoall_pairwise,
    (CommOpKind.all_to_allv, "naive"): _alltoall_naive,
}


def run_collective(
    transport: Transport,
    rank: int,
    p: int,
    request: CommRequest,
    algorithm: str,
    *,
    deadline: Optional[float] = None,
    codec=None,
    codec_id: Optional[str] = None,
) -> None:
    """Header agreement followed by the selected algorithm. Fills the
    request's output buffers in place."""
    comm = Comm(transport, request.seq or 0, deadline, codec)
    _agree_header(comm, rank, p, request, codec_id)
    impl = _IMPLS.get((request.kind, algorithm))
    if impl is None:
        raise UnsupportedOperation(
            f"no {algorithm!r} implementation for {request.kind.name}"
        )
    impl(comm, rank, p, request)


def critical_rounds(kind: CommOpKind, algorithm: str, p: int) -> int:
    """Sequential payload-message rounds on the critical path, used by the
    tuner's latency sanity checks."""
    if p == 1:
        return 0
    log2p = math.ceil(math.log2(p))
    q_extra = 0 if p & (p - 1) == 0 else 2
    family = {
        CommOpKind.all_gatherv: CommOpKind.all_gather,
        CommOpKind.all_to_all: CommOpKind.all_to_all_single,
        CommOpKind.all_to_allv: CommOpKind.all_to_all_single,
        CommOpKind.gatherv: CommOpKind.gather,
        CommOpKind.scatterv: CommOpKind.scatter,
        CommOpKind.recv: CommOpKind.send,
    }.get(kind, kind)
    table = {
        ("all_reduce", "ring"): 2 * (p - 1),
        ("all_reduce", "recursive_doubling"): math.floor(math.log2(p)) + q_extra,
        ("all_reduce", "naive"): 2,
        ("reduce", "linear"): 1,
        ("reduce", "binomial_tree"): log2p,
        ("bcast", "linear"): 1,
        ("bcast", "binomial_tree"): log2p,
        ("all_gather", "ring"): p - 1,
        ("all_gather", "bruck"): log2p,
        ("all_gather", "naive"): 1,
        ("gather", "linear"): 1,
        ("gather", "binomial_tree"): log2p,
        ("scatter", "linear"): 1,
        ("scatter", "binomial_tree"): log2p,
        ("reduce_scatter", "ring"): p - 1,
        ("reduce_scatter", "naive"): 2,
        ("all_to_all_single", "pairwise_exchange"): p - 1,
        ("all_to_all_single", "bruck"): log2p,
        ("all_to_all_single", "naive"): 1,
        ("send", "direct"): 1,
    }
    return table.get((family.value, algorithm), 1)
