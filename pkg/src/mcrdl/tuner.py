"""Tuning suite: micro-benchmark every (op, backend, world size, message
size) combination, pick winners, and emit a dispatch tuning table.

End-to-end time means the slowest rank: per iteration, ranks exchange
their measured durations and keep the cross-rank maximum. Backends that
do not support an op are recorded as skipped rather than failing the
sweep, so partial tables stay valid.
"""

from __future__ import annotations

import statistics as stats
from dataclasses import dataclass
from time import perf_counter
from typing import Sequence

import numpy as np

from .core import Buffer, CommOpKind, CommRequest, DType, ReduceOp
from .dispatch import SIZE_BUCKETS, TableEntry, TuningTable, save_table
from .errors import EmptySamples, ValidationError

STATISTICS = ("median", "mean", "min")

DEFAULT_BENCH_OPS = (
    CommOpKind.all_reduce,
    CommOpKind.all_gather,
    CommOpKind.all_to_all_single,
    CommOpKind.bcast,
    CommOpKind.reduce_scatter,
)


@dataclass
class BenchConfig:
    ops: Sequence[CommOpKind] = DEFAULT_BENCH_OPS
    sizes: Sequence[int] = SIZE_BUCKETS
    dtype: DType = DType.f32
    warmup_iters: int = 5
    measure_iters: int = 20
    statistic: str = "median"

    def __post_init__(self):
        self.ops = [CommOpKind(o) if isinstance(o, str) else o for o in self.ops]
        if self.measure_iters < 3:
            raise ValidationError("measure_iters", "must be >= 3")
        if list(self.sizes) != sorted(self.sizes):
            raise ValidationError("sizes", "must be ascending")
        if self.statistic not in STATISTICS:
            raise ValidationError("statistic", f"one of {STATISTICS}")


@dataclass
class BenchSample:
    op: CommOpKind
    backend: str
    world_size: int
    bytes: int
    durations: list[float]


@dataclass
class SkippedCombination:
    op: CommOpKind
    backend: str
    world_size: int
    bytes: int
    reason: str


def statistic_value(durations: Sequence[float], statistic: str) -> float:
    if statistic == "median":
        return stats.median(durations)
    if statistic == "mean":
        return stats.fmean(durations)
    if statistic == "min":
        return min(durations)
    raise ValidationError("statistic", f"one of {STATISTICS}")


def _bench_request(
    kind: CommOpKind, nbytes: int, dtype: DType, p: int, rank: int, backend: str
) -> CommRequest:
    """Build a request whose canonical message size is nbytes (element
    counts round up where an op needs divisibility by p)."""
    esize = dtype.size_bytes
    n = max(nbytes // esize, 1)

    def buf(count: int) -> Buffer:
        return Buffer(np.ones(count, dtype=dtype.np_dtype))

    if kind is CommOpKind.all_reduce:
        b = buf(n)
        return CommRequest(kind, input=b, output=b, op=ReduceOp.sum, backend=backend)
    if kind is CommOpKind.reduce:
        b = buf(n)
        return CommRequest(kind, input=b, output=b, op=ReduceOp.sum, root=0,
                           backend=backend)
    if kind is CommOpKind.bcast:
        return CommRequest(kind, output=buf(n), root=0, backend=backend)
    if kind is CommOpKind.all_gather:
        return CommRequest(kind, input=buf(n), output=buf(n * p), backend=backend)
    if kind is CommOpKind.gather:
        out = buf(n * p) if rank == 0 else None
        return CommRequest(kind, input=buf(n), output=out, root=0, backend=backend)
    if kind is CommOpKind.scatter:
        m = -(-n // p)  # per-rank share, canonical size stays ~nbytes
        inp = buf(m * p) if rank == 0 else None
        return CommRequest(kind, input=inp, output=buf(m), root=0, backend=backend)
    if kind is CommOpKind.reduce_scatter:
        m = -(-n // p)
        return CommRequest(kind, input=buf(m * p), output=buf(m), op=ReduceOp.sum,
                           backend=backend)
    if kind is CommOpKind.all_to_all_single:
        m = -(-n // p)
        return CommRequest(kind, input=buf(m * p), output=buf(m * p), backend=backend)
    if kind is CommOpKind.all_to_all:
        m = -(-n // p)
        return CommRequest(kind, input=[buf(m) for _ in range(p)],
                           output=[buf(m) for _ in range(p)], backend=backend)
    if kind is CommOpKind.send:
        return CommRequest(kind, input=buf(n), root=1, backend=backend)
    if kind is CommOpKind.recv:
        return CommRequest(kind, output=buf(n), root=0, backend=backend)
    raise ValidationError("op", f"{kind.name} is not benchmarkable")


def _run_once(rt, kind: CommOpKind, nbytes: int, dtype: DType, p: int, backend: str):
    """One blocking iteration of the benched op; send/recv become a rank
    0<->1 ping-pong and other ranks sit out."""
    rank = rt.get_rank(backend)
    if kind in (CommOpKind.send, CommOpKind.recv):
        if p == 1:
            return
        if rank == 0:
            req = _bench_request(CommOpKind.send, nbytes, dtype, p, rank, backend)
            rt.post(req)
            back = _bench_request(CommOpKind.recv, nbytes, dtype, p, rank, backend)
            back.root = 1
            rt.post(back)
        elif rank == 1:
            req = _bench_request(CommOpKind.recv, nbytes, dtype, p, rank, backend)
            rt.post(req)
            fwd = _bench_request(CommOpKind.send, nbytes, dtype, p, rank, backend)
            fwd.root = 0
            rt.post(fwd)
        return
    rt.post(_bench_request(kind, nbytes, dtype, p, rank, backend))


def _barrier(rt, backend: str) -> None:
    """Barrier-equivalent: a 0-byte collective (header round only). Falls
    back to bcast for backends whose policy disables all_reduce."""
    b = Buffer.zeros(DType.f32, 0)
    if rt._instance(backend).policy.supports(CommOpKind.all_reduce):
        rt.post(CommRequest(CommOpKind.all_reduce, input=b, output=b,
                            op=ReduceOp.sum, backend=backend))
    elif rt._instance(backend).policy.supports(CommOpKind.bcast):
        rt.post(CommRequest(CommOpKind.bcast, output=b, root=0, backend=backend))


def bench(rt, config: BenchConfig) -> tuple[list[BenchSample], list[SkippedCombination]]:
    """Run the sweep on every rank (all ranks must use an identical
    config). Returns identical cross-rank-maxed samples on every rank.

    Backends are interleaved per iteration so that scheduler drift over the
    sweep hits every candidate equally; winner margins down at the tens of
    microseconds then survive desk-scale noise."""
    samples: list[BenchSample] = []
    skipped: list[SkippedCombination] = []
    backends = rt.get_backends()
    p = rt.world_size
    if config.ops:
        # Prelude: warm every lane (thread start, allocator, frame paths)
        # before anything is timed, so the first grid cell is not biased.
        for _ in range(4):
            for backend in backends:
                _barrier(rt, backend)
    for op in config.ops:
        benchable = []
        for backend in backends:
            if rt._instance(backend).policy.supports(op):
                benchable.append(backend)
            else:
                skipped.extend(
                    SkippedCombination(op, backend, p, nbytes, "unsupported")
                    for nbytes in config.sizes
                )
        if not benchable:
            continue
        for nbytes in config.sizes:
            durations = {
                backend: np.zeros(config.measure_iters, dtype=np.float64)
                for backend in benchable
            }
            for backend in benchable:
                for _ in range(config.warmup_iters):
                    _run_once(rt, op, nbytes, config.dtype, p, backend)
            for it in range(config.measure_iters):
                # Rotate the pair order so neither backend always pays the
                # first-after-barrier cost.
                rotation = benchable[it % len(benchable):] + benchable[:it % len(benchable)]
                for backend in rotation:
                    _barrier(rt, backend)
                    t0 = perf_counter()
                    _run_once(rt, op, nbytes, config.dtype, p, backend)
                    durations[backend][it] = perf_counter() - t0
            for backend in benchable:
                if p > 1:
                    shared = Buffer(durations[backend])
                    rt.post(
                        CommRequest(CommOpKind.all_reduce, input=shared,
                                    output=shared, op=ReduceOp.max, backend=backend)
                    )
                samples.append(
                    BenchSample(op, backend, p, nbytes, durations[backend].tolist())
                )
    return samples, skipped


def winner_grid(
    samples: Sequence[BenchSample],
    statistic: str = "median",
    skipped: Sequence[SkippedCombination] = (),
) -> dict[tuple[CommOpKind, int, int], str]:
    """Per (op, world, size) cell, the backend with the minimum statistic;
    ties break to the lexicographically smaller id. Every cell of the
    ops x worlds x sizes grid must be measured or explicitly skipped."""
    if not samples:
        raise EmptySamples("no benchmark samples")
    by_cell: dict[tuple[CommOpKind, int, int], list[BenchSample]] = {}
    for sample in samples:
        by_cell.setdefault((sample.op, sample.world_size, sample.bytes), []).append(sample)
    skip_cells = {(s.op, s.world_size, s.bytes) for s in skipped}
    ops = sorted({s.op for s in samples} | {s.op for s in skipped}, key=lambda k: k.value)
    worlds = sorted({s.world_size for s in samples} | {s.world_size for s in skipped})
    sizes = sorted({s.bytes for s in samples} | {s.bytes for s in skipped})
    grid: dict[tuple[CommOpKind, int, int], str] = {}
    for op in ops:
        for world in worlds:
            for size in sizes:
                cell = (op, world, size)
                if cell not in by_cell:
                    if cell in skip_cells:
                        continue
                    raise EmptySamples(
                        f"missing combination {op.value}/{world}/{size}B"
                    )
                best = min(
                    by_cell[cell],
                    key=lambda s: (statistic_value(s.durations, statistic), s.backend),
                )
                grid[cell] = best.backend
    return grid


def build_table(
    samples: Sequence[BenchSample],
    statistic: str = "median",
    *,
    skipped: Sequence[SkippedCombination] = (),
    system: str = "local",
) -> TuningTable:
    grid = winner_grid(samples, statistic, skipped)
    tables: dict[CommOpKind, dict[int, list[TableEntry]]] = {}
    cells_by_key: dict[tuple[CommOpKind, int], list[tuple[int, str]]] = {}
    for (op, world, size), backend in grid.items():
        cells_by_key.setdefault((op, world), []).append((size, backend))
    for (op, world), pairs in cells_by_key.items():
        pairs.sort()
        entries = [TableEntry(size, backend) for size, backend in pairs]
        tables.setdefault(op, {})[world] = TuningTable.merge_runs(entries)
    return TuningTable(tables, system=system)


def emit(table: TuningTable, path: str) -> None:
    save_table(table, path)
