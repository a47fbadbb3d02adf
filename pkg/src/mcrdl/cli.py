"""Operator entry points: local multi-rank launch, micro-benchmarks,
tuning, log reports, the mixed-backend demo, and a self-test.

Thread mode (default) runs ranks as threads over the inproc transport;
process mode re-execs this CLI once per rank with the MCRDL_* environment
set and ranks talk tcp. Exit code is the max across ranks.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import zlib
from typing import Optional

import numpy as np

from . import reference, tuner
from .core import Buffer, CommOpKind, DType, ReduceOp
from .dispatch import load_table
from .errors import CommError, OrderMismatch, ValidationError
from .local import run_thread_world
from .middleware import report as build_report
from .runtime import (
    ENV_MASTER_ADDR,
    ENV_MASTER_PORT,
    ENV_RANK,
    ENV_WORLD_SIZE,
    BackendConfig,
    Runtime,
)
from .transport import CostShape, InprocFabric, free_port

_DURATION_UNITS = {"ns": 1e-9, "us": 1e-6, "ms": 1e-3, "s": 1.0}
_SIZE_UNITS = {"": 1, "K": 1 << 10, "M": 1 << 20, "G": 1 << 30}


def parse_duration(text: str) -> float:
    text = text.strip()
    for unit in ("ns", "us", "ms", "s"):
        if text.endswith(unit):
            return float(text[: -len(unit)]) * _DURATION_UNITS[unit]
    return float(text)


def parse_size(text: str) -> int:
    text = text.strip().upper().rstrip("B")
    unit = text[-1] if text and text[-1] in "KMG" else ""
    number = text[: -1] if unit else text
    return int(float(number) * _SIZE_UNITS[unit])


def parse_sizes(text: str) -> list[int]:
    """Comma list of sizes; MIN:MAX expands to the powers of two between
    them inclusive, e.g. "1K:1M" or "64,256,4K:64K"."""
    out: list[int] = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if ":" in item:
            lo_s, hi_s = item.split(":", 1)
            lo, hi = parse_size(lo_s), parse_size(hi_s)
            size = 1 << (lo - 1).bit_length() if lo > 1 else 1
            while size <= hi:
                if size >= lo:
                    out.append(size)
                size <<= 1
        else:
            out.append(parse_size(item))
    return sorted(set(out))


def parse_backend_specs(text: str, transport: str) -> list[BackendConfig]:
    """Backend grammar: "name" or "name:ALPHA/BETA" where ALPHA is a
    per-message latency (e.g. 100us) and BETA a per-byte time (e.g. 1ns);
    comma-separated list."""
    configs = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        shape = None
        name = item
        if ":" in item:
            name, spec = item.split(":", 1)
            alpha_s, _, beta_s = spec.partition("/")
            shape = CostShape(parse_duration(alpha_s), parse_duration(beta_s or "0s"))
        configs.append(BackendConfig(name=name, transport=transport, shape=shape))
    if not configs:
        raise ValidationError("backends", "no backends given")
    return configs


def _transport_for(rt: Runtime) -> str:
    return "inproc" if rt.fabric is not None else "tcp"


# --------------------------------------------------------------------------
# Mixed-backend demo (two async all_reduces on different backends
# overlapped with local compute; result must match a one-backend run).


def run_mixed_demo(
    rt: Runtime,
    backend_a: str,
    backend_b: str,
    count: int = 4096,
    seed: int = 1234,
    inject_mismatch: bool = False,
) -> dict:
    rng = np.random.default_rng(seed * 1000 + rt.rank)
    x0 = rng.standard_normal(count).astype(np.float32)
    y0 = rng.standard_normal(count).astype(np.float32)
    z0 = rng.standard_normal(count).astype(np.float32)

    x, y = Buffer(x0.copy()), Buffer(y0.copy())
    z = z0.copy()
    if inject_mismatch and rt.rank == 0 and rt.world_size > 1:
        h1 = rt.bcast(backend_a, x, root=0, async_op=True)
    else:
        h1 = rt.all_reduce(backend_a, x, ReduceOp.sum, async_op=True)
    h2 = rt.all_reduce(backend_b, y, ReduceOp.sum, async_op=True)
    z = z + z
    try:
        rt.wait(h1)
        rt.wait(h2)
    except OrderMismatch as exc:
        rt.wait(h2)
        return {"status": "order_mismatch", "error": str(exc)}
    result = x.array + y.array + z

    ox, oy = Buffer(x0.copy()), Buffer(y0.copy())
    rt.all_reduce(backend_a, ox, ReduceOp.sum)
    rt.all_reduce(backend_a, oy, ReduceOp.sum)
    expected = ox.array + oy.array + 2.0 * z0

    scale = np.maximum(np.abs(expected), 1.0)
    max_rel = float(np.max(np.abs(result - expected) / scale)) if count else 0.0
    return {
        "status": "ok" if max_rel <= 1e-6 else "mismatch",
        "max_rel_err": max_rel,
        "result": result,
        "expected": expected,
    }


# --------------------------------------------------------------------------
# Self-test: every collective against the sequential reference on live
# backends, with deterministic integer-valued payloads (exact in f32).

SELFTEST_COUNTS = (0, 1, 5)
SELFTEST_DTYPES = (DType.f32, DType.i64)


def _case_values(kind: str, dtype: DType, count: int, rank: int, n: int) -> np.ndarray:
    seed = zlib.crc32(f"{kind}|{dtype.name}|{count}|{rank}".encode())
    rng = np.random.default_rng(seed)
    return rng.integers(-50, 50, size=n).astype(dtype.np_dtype)


def _vec_counts(count: int, p: int) -> tuple[list[int], list[int]]:
    counts = [(r * 7 + 3) % (count + 1) for r in range(p)]
    displs = np.cumsum([0] + counts[:-1]).tolist() if p else []
    return counts, displs


def _a2av_matrix(count: int, p: int) -> list[list[int]]:
    return [[(i * 5 + j * 3) % (count + 1) for j in range(p)] for i in range(p)]


def run_selftest_cases(rt: Runtime, backend: str, dump: Optional[list] = None) -> int:
    """Returns number of failed cases on this rank; appends parity cases to
    ``dump`` when given (all inputs and reference outputs, all ranks)."""
    p = rt.world_size
    rank = rt.rank
    failures = 0

    def check(name: str, got: np.ndarray, expect: np.ndarray) -> int:
        if got.shape == expect.shape and np.array_equal(got, expect):
            return 0
        sys.stderr.write(
            f"[rank {rank}] selftest {name}: got {got!r} expected {expect!r}\n"
        )
        return 1

    for dtype in SELFTEST_DTYPES:
        for count in SELFTEST_COUNTS:
            root = count % p
            per_rank = [
                _case_values(f"base", dtype, count, r, count) for r in range(p)
            ]
            mine = per_rank[rank]
            case_base = {"dtype": dtype.name, "count": count, "root": root,
                         "inputs": [v.tolist() for v in per_rank]}

            def record(op: str, expected_per_rank, extra: Optional[dict] = None):
                if dump is not None and rank == 0:
                    case = dict(case_base)
                    case["op"] = op
                    case["expected"] = [np.asarray(e).tolist() for e in expected_per_rank]
                    case.update(extra or {})
                    dump.append(case)

            # all_reduce
            buf = Buffer(mine.copy())
            rt.all_reduce(backend, buf, ReduceOp.sum)
            expect = reference.all_reduce(per_rank, ReduceOp.sum)
            failures += check("all_reduce", buf.array, expect[rank])
            record("all_reduce", expect)

            # reduce
            buf = Buffer(mine.copy())
            rt.reduce(backend, buf, root, ReduceOp.sum)
            expect = reference.reduce(per_rank, ReduceOp.sum, root)
            if rank == root:
                failures += check("reduce", buf.array, expect[rank])
            record("reduce", expect)

            # bcast
            buf = Buffer(mine.copy())
            rt.bcast(backend, buf, root)
            expect = reference.bcast(per_rank, root)
            failures += check("bcast", buf.array, expect[rank])
            record("bcast", expect)

            # all_gather
            out = Buffer.zeros(dtype, p * count)
            rt.all_gather(backend, out, Buffer(mine.copy()))
            expect = reference.all_gather(per_rank)
            failures += check("all_gather", out.array, expect[rank])
            record("all_gather", expect)

            # gather
            out = Buffer.zeros(dtype, p * count) if rank == root else None
            rt.gather(backend, out, Buffer(mine.copy()), root)
            expect = reference.gather(per_rank, root)
            if rank == root:
                failures += check("gather", out.array, expect[rank])
            record("gather", expect)

            # scatter
            src = Buffer(np.concatenate(per_rank)) if rank == root else None
            out = Buffer.zeros(dtype, count)
            rt.scatter(backend, out, src, root)
            expect = reference.scatter(np.concatenate(per_rank), root, p)
            failures += check("scatter", out.array, expect[rank])
            record("scatter", expect, {"root_input": np.concatenate(per_rank).tolist()})

            # reduce_scatter
            inp = Buffer(_case_values("rs", dtype, count, rank, p * count))
            out = Buffer.zeros(dtype, count)
            rs_inputs = [_case_values("rs", dtype, count, r, p * count) for r in range(p)]
            rt.reduce_scatter(backend, out, inp, ReduceOp.sum)
            expect = reference.reduce_scatter(rs_inputs, ReduceOp.sum)
            failures += check("reduce_scatter", out.array, expect[rank])
            record("reduce_scatter", expect,
                   {"inputs": [v.tolist() for v in rs_inputs]})

            # all_to_all_single
            inp = Buffer(_case_values("a2a", dtype, count, rank, p * count))
            out = Buffer.zeros(dtype, p * count)
            a2a_inputs = [_case_values("a2a", dtype, count, r, p * count) for r in range(p)]
            rt.all_to_all_single(backend, out, inp)
            expect = reference.all_to_all_single(a2a_inputs)
            failures += check("all_to_all_single", out.array, expect[rank])
            record("all_to_all_single", expect,
                   {"inputs": [v.tolist() for v in a2a_inputs]})

            # all_to_all (list form)
            ins = [Buffer(_case_values(f"a2al{j}", dtype, count, rank, count))
                   for j in range(p)]
            outs = [Buffer.zeros(dtype, count) for _ in range(p)]
            lists = [
                [_case_values(f"a2al{j}", dtype, count, r, count) for j in range(p)]
                for r in range(p)
            ]
            rt.all_to_all(backend, outs, ins)
            expect = reference.all_to_all(lists)
            for j in range(p):
                failures += check(f"all_to_all[{j}]", outs[j].array, expect[rank][j])
            record("all_to_all", [np.concatenate(e) if e else [] for e in expect],
                   {"inputs": [np.concatenate(row).tolist() for row in lists]})

            # vectored: gatherv / scatterv / all_gatherv / all_to_allv
            counts, displs = _vec_counts(count, p)
            vin = Buffer(_case_values("v", dtype, count, rank, counts[rank]))
            v_inputs = [_case_values("v", dtype, count, r, counts[r]) for r in range(p)]

            out = Buffer.zeros(dtype, sum(counts)) if rank == root else None
            rt.gatherv(backend, out, Buffer(vin.array.copy()), root, counts, displs)
            expect = reference.gatherv(v_inputs, root, counts, displs)
            if rank == root:
                failures += check("gatherv", out.array, expect[rank])
            record("gatherv", expect,
                   {"rcounts": counts, "displs": displs,
                    "inputs": [v.tolist() for v in v_inputs]})

            out = Buffer.zeros(dtype, sum(counts))
            rt.all_gatherv(backend, out, Buffer(vin.array.copy()), counts, displs)
            expect = reference.all_gatherv(v_inputs, counts, displs)
            failures += check("all_gatherv", out.array, expect[rank])
            record("all_gatherv", expect,
                   {"rcounts": counts, "displs": displs,
                    "inputs": [v.tolist() for v in v_inputs]})

            packed = np.zeros(sum(counts), dtype=dtype.np_dtype)
            for r in range(p):
                packed[displs[r] : displs[r] + counts[r]] = v_inputs[r]
            src = Buffer(packed) if rank == root else None
            out = Buffer.zeros(dtype, counts[rank])
            rt.scatterv(backend, out, src, root, counts, displs)
            expect = reference.scatterv(packed, counts, displs)
            failures += check("scatterv", out.array, expect[rank])
            record("scatterv", expect,
                   {"scounts": counts, "displs": displs,
                    "root_input": packed.tolist()})

            sc = _a2av_matrix(count, p)
            sdispls_all = [np.cumsum([0] + sc[i][:-1]).tolist() for i in range(p)]
            rdispls_all = [
                np.cumsum([0] + [sc[j][i] for j in range(p)][:-1]).tolist()
                for i in range(p)
            ]
            av_inputs = [
                _case_values("a2av", dtype, count, r, sum(sc[r])) for r in range(p)
            ]
            inp = Buffer(av_inputs[rank].copy())
            out = Buffer.zeros(dtype, sum(sc[j][rank] for j in range(p)))
            rt.all_to_allv(
                backend, out, inp,
                scounts=sc[rank], rcounts=[sc[j][rank] for j in range(p)],
                sdispls=sdispls_all[rank], rdispls=rdispls_all[rank],
            )
            expect = reference.all_to_allv(av_inputs, sc, sdispls_all, rdispls_all)
            failures += check("all_to_allv", out.array, expect[rank])
            record("all_to_allv", expect,
                   {"scounts": sc, "sdispls": sdispls_all, "rdispls": rdispls_all,
                    "inputs": [v.tolist() for v in av_inputs]})
    return failures


# --------------------------------------------------------------------------
# Subcommand bodies (run per rank; rank 0 owns stdout)

BENCH_CSV_HEADER = "op,backend,world,bytes,p50_us,min_us,max_us,status"


def _cmd_bench(rt: Runtime, args) -> int:
    configs = parse_backend_specs(args.backends, _transport_for(rt))
    rt.init(configs)
    if args.table:
        rt.tuning_table = load_table(args.table, known_backends=rt.get_backends())
    config = tuner.BenchConfig(
        ops=[CommOpKind(o) for o in args.ops.split(",") if o],
        sizes=parse_sizes(args.sizes),
        warmup_iters=args.warmup,
        measure_iters=args.iters,
    )
    samples, skipped = tuner.bench(rt, config)
    if rt.rank == 0:
        print(BENCH_CSV_HEADER)
        rows = [
            (s.op.value, s.backend, s.world_size, s.bytes,
             f"{tuner.statistic_value(s.durations, 'median') * 1e6:.1f}",
             f"{min(s.durations) * 1e6:.1f}", f"{max(s.durations) * 1e6:.1f}", "ok")
            for s in samples
        ] + [
            (s.op.value, s.backend, s.world_size, s.bytes, "", "", "", "skipped")
            for s in skipped
        ]
        for row in sorted(rows, key=lambda r: (r[0], r[1], r[3])):
            print(",".join(str(v) for v in row))
    rt.finalize()
    return 0


def _cmd_tune(args) -> int:
    """Driver command: spins one thread-mode world per requested scale,
    merges samples, and emits the table."""
    ops = [CommOpKind(o) for o in args.ops.split(",") if o]
    if not ops:
        sys.stderr.write("usage: tune requires at least one op in --ops\n")
        return 2
    sizes = parse_sizes(args.sizes)
    scales = sorted(int(s) for s in args.scales.split(","))
    all_samples: list[tuner.BenchSample] = []
    all_skipped: list[tuner.SkippedCombination] = []

    for scale in scales:
        def entry(rt: Runtime, rank: int):
            rt.init(parse_backend_specs(args.backends, "inproc"))
            config = tuner.BenchConfig(
                ops=ops, sizes=sizes,
                warmup_iters=args.warmup, measure_iters=args.iters,
                statistic=args.statistic,
            )
            result = tuner.bench(rt, config)
            rt.finalize()
            return result

        samples, skipped = run_thread_world(scale, entry)[0]
        all_samples.extend(samples)
        all_skipped.extend(skipped)

    grid = tuner.winner_grid(all_samples, args.statistic, all_skipped)
    table = tuner.build_table(
        all_samples, args.statistic, skipped=all_skipped, system=args.system
    )
    try:
        tuner.emit(table, args.out)
    except CommError as exc:
        sys.stderr.write(f"tune: cannot write {args.out}: {exc}\n")
        return 1
    print(f"entries pre-merge: {len(grid)}")
    print(f"entries post-merge: {table.entry_count()}")
    print(f"table written: {args.out}")
    return 0


def _cmd_report(args) -> int:
    breakdown = build_report(args.logs, view=args.view)
    if args.csv:
        print("op,backend,total_us,percent,count")
        for row in breakdown.rows:
            print(f"{row.op},{row.backend},{row.total_us:.1f},"
                  f"{row.percent:.2f},{row.count}")
    else:
        print(f"{'op':<20}{'backend':<14}{'total_us':>14}{'percent':>10}{'count':>8}")
        for row in breakdown.rows:
            print(f"{row.op:<20}{row.backend:<14}{row.total_us:>14.1f}"
                  f"{row.percent:>9.2f}%{row.count:>8}")
        print(f"total: {breakdown.total_seconds:.6f} s ({breakdown.view} view)")
    return 0


def _cmd_demo(rt: Runtime, args) -> int:
    configs = parse_backend_specs(args.backends, _transport_for(rt))
    rt.init(configs)
    if args.table:
        rt.tuning_table = load_table(args.table, known_backends=rt.get_backends())
    names = rt.get_backends()
    if len(names) < 2:
        if rt.rank == 0:
            print("demo-mixed: needs two backends, skipping")
        rt.finalize()
        return 0
    outcome = run_mixed_demo(
        rt, names[0], names[1], count=args.count, seed=args.seed,
        inject_mismatch=args.inject_mismatch,
    )
    if outcome["status"] == "order_mismatch":
        if rt.rank == 0:
            print(f"OrderMismatch detected: {outcome['error']}")
        code = 3
    else:
        code = 0 if outcome["status"] == "ok" else 1
        if rt.rank == 0:
            if args.json:
                print(json.dumps({
                    "status": outcome["status"],
                    "max_rel_err": outcome["max_rel_err"],
                    "result": outcome["result"].tolist(),
                    "expected": outcome["expected"].tolist(),
                }))
            else:
                print(f"{'PASS' if outcome['status'] == 'ok' else 'FAIL'} "
                      f"(max relative error {outcome['max_rel_err']:.2e})")
    rt.finalize()
    return code


def _cmd_selftest(rt: Runtime, args) -> int:
    configs = parse_backend_specs(args.backends, _transport_for(rt))
    rt.init(configs)
    dump: Optional[list] = [] if args.out else None
    failures = 0
    for backend in rt.get_backends():
        failures += run_selftest_cases(
            rt, backend, dump if backend == rt.get_backends()[0] else None
        )
    if args.out and rt.rank == 0:
        with open(args.out, "w") as fh:
            json.dump({"world_size": rt.world_size, "cases": dump}, fh)
    if rt.rank == 0:
        print("selftest: PASS" if failures == 0 else f"selftest: {failures} FAILURES")
    rt.finalize()
    return 0 if failures == 0 else 1


RANK_COMMANDS = {
    "bench": _cmd_bench,
    "demo-mixed": _cmd_demo,
    "selftest": _cmd_selftest,
}


def _cmd_launch(args, remainder: list[str]) -> int:
    if args.nranks < 1:
        sys.stderr.write("launch: --nranks must be >= 1\n")
        return 2
    if not remainder:
        sys.stderr.write("launch: missing subcommand to run\n")
        return 2
    if remainder[0] not in RANK_COMMANDS:
        sys.stderr.write(
            f"launch: {remainder[0]!r} is not a rank subcommand "
            f"(one of {sorted(RANK_COMMANDS)})\n"
        )
        return 2

    if args.mode == "threads":
        sub = _build_parser().parse_args(remainder)

        def entry(rt: Runtime, rank: int) -> int:
            return RANK_COMMANDS[remainder[0]](rt, sub)

        try:
            codes = run_thread_world(args.nranks, entry, timeout=args.timeout)
        except CommError as exc:
            sys.stderr.write(f"launch: {exc}\n")
            return 1
        return max(int(c or 0) for c in codes)

    host, _, port_s = (args.master or "").partition(":")
    host = host or "127.0.0.1"
    port = int(port_s) if port_s else free_port(host)
    procs = []
    for rank in range(args.nranks):
        env = dict(
            os.environ,
            **{
                ENV_RANK: str(rank),
                ENV_WORLD_SIZE: str(args.nranks),
                ENV_MASTER_ADDR: host,
                ENV_MASTER_PORT: str(port),
            },
        )
        procs.append(
            subprocess.Popen(
                [sys.executable, "-m", "mcrdl"] + remainder,
                env=env,
                stdout=None if rank == 0 else subprocess.DEVNULL,
            )
        )
    codes = [p.wait() for p in procs]
    return max(codes)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcrdl")
    sub = parser.add_subparsers(dest="command", required=True)

    launch = sub.add_parser("launch", help="run a subcommand on n local ranks")
    launch.add_argument("-n", "--nranks", type=int, required=True)
    launch.add_argument("--mode", choices=("threads", "processes"), default="threads")
    launch.add_argument("--master", default=None, help="host:port for process mode")
    launch.add_argument("--timeout", type=float, default=None)

    bench = sub.add_parser("bench", help="micro-benchmark collectives")
    bench.add_argument("--ops", default="all_reduce")
    bench.add_argument("--backends", default="a")
    bench.add_argument("--sizes", default="4,64,1K,64K")
    bench.add_argument("--iters", type=int, default=20)
    bench.add_argument("--warmup", type=int, default=5)
    bench.add_argument("--table", default=None, help="tuning table for auto dispatch")

    tune = sub.add_parser("tune", help="benchmark backends and emit a tuning table")
    tune.add_argument("--ops", default=",".join(k.value for k in tuner.DEFAULT_BENCH_OPS))
    tune.add_argument("--backends", default="a:100us/1ns,b:10us/10ns")
    tune.add_argument("--sizes", default="4:128K")
    tune.add_argument("--scales", default="2")
    tune.add_argument("--iters", type=int, default=20)
    tune.add_argument("--warmup", type=int, default=5)
    tune.add_argument("--statistic", choices=tuner.STATISTICS, default="median")
    tune.add_argument("--system", default="local")
    tune.add_argument("--out", required=True)

    rep = sub.add_parser("report", help="aggregate communication logs")
    rep.add_argument("logs", nargs="+")
    rep.add_argument("--csv", action="store_true")
    rep.add_argument("--view", choices=("sum", "max"), default="sum")

    demo = sub.add_parser("demo-mixed", help="two-backend overlap demo")
    demo.add_argument("--backends", default="a,b")
    demo.add_argument("--count", type=int, default=4096)
    demo.add_argument("--seed", type=int, default=1234)
    demo.add_argument("--inject-mismatch", action="store_true")
    demo.add_argument("--json", action="store_true")
    demo.add_argument("--table", default=None, help="tuning table for auto dispatch")

    self_p = sub.add_parser("selftest", help="verify collectives against the reference")
    self_p.add_argument("--backends", default="a")
    self_p.add_argument("--out", default=None, help="write a parity dump (rank 0)")

    return parser


def _standalone_runtime() -> Runtime:
    """Runtime for a bare subcommand invocation: a process-mode rank when
    the MCRDL environment is set, else a world of one."""
    world = int(os.environ.get(ENV_WORLD_SIZE, "1"))
    if world > 1:
        return Runtime()
    return Runtime(rank=0, world_size=1, fabric=InprocFabric(1))


def main(argv: Optional[list[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] == "launch":
        split = next(
            (i for i, tok in enumerate(argv[1:], 1) if tok in RANK_COMMANDS), None
        )
        if split is None:
            sys.stderr.write(
                f"launch: missing rank subcommand (one of {sorted(RANK_COMMANDS)})\n"
            )
            return 2
        args = _build_parser().parse_args(argv[:split])
        return _cmd_launch(args, argv[split:])
    args = _build_parser().parse_args(argv)
    if args.command == "tune":
        return _cmd_tune(args)
    if args.command == "report":
        return _cmd_report(args)
    handler = RANK_COMMANDS[args.command]
    rt = _standalone_runtime()
    try:
        return handler(rt, args)
    except CommError as exc:
        sys.stderr.write(f"{args.command}: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
