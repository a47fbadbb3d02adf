"""Acceptance criteria A1-A10, one pass/fail line per criterion.

A11 (foreign-bindings parity) lives in the frontend package's test suite,
driven against this package's CLI and wire surfaces.

Run with: pytest tests/test_acceptance.py -v
"""

import json
import random
import statistics
import time

import numpy as np
import pytest

from mcrdl import (
    AlgorithmPolicy,
    BackendConfig,
    Buffer,
    CommOpKind,
    CommRequest,
    CostShape,
    DType,
    FusionConfig,
    LogRecord,
    ReduceOp,
    load_table,
    route,
)
from mcrdl.cli import run_mixed_demo
from mcrdl.errors import OrderMismatch
from mcrdl.middleware import report
from mcrdl.tuner import BenchConfig, bench, build_table, winner_grid

from cases import COLLECTIVE_KINDS, assert_matches, make_case
from conftest import collective_world, world

A1_BUDGET_SECONDS = 120.0
_a1_clock = {"elapsed": 0.0, "runs": 0}


def _announce(tag: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    print(f"[{status}] {tag} {detail}")
    assert ok, f"{tag} {detail}"


# --------------------------------------------------------------------------
# A1: oracle equivalence for every collective on both transports.

A1_PS = [2, 3, 4, 5, 8]
A1_COUNTS = [0, 1, 7, 64, 1000]
A1_DTYPES = [DType.f32, DType.i64]


@pytest.mark.parametrize("transport", ["inproc", "tcp"])
@pytest.mark.parametrize("p", A1_PS)
def test_A1_oracle_equivalence(transport, p):
    started = time.monotonic()
    cases = [
        make_case(kind, dtype, count, p, seed=hashseed)
        for hashseed, (kind, dtype, count) in enumerate(
            (kind, dtype, count)
            for kind in COLLECTIVE_KINDS
            for dtype in A1_DTYPES
            for count in A1_COUNTS
        )
    ]

    def body(rt, rank):
        outputs = []
        for case in cases:
            req = case.build_request(rank, "a")
            rt.post(req)
            outputs.append(case.result_of(rank, req))
        return outputs

    configs = lambda: [BackendConfig("a", transport=transport)]
    results = collective_world(p, body, configs=configs, tcp=(transport == "tcp"),
                               timeout=60.0, join_timeout=240.0)
    for idx, case in enumerate(cases):
        expected = case.expected()
        for rank in range(p):
            assert_matches(case, results[rank][idx], expected[rank],
                           f"{transport}/p{p}/{case.kind.value}/"
                           f"{case.dtype.name}/n{case.count}")
    _a1_clock["elapsed"] += time.monotonic() - started
    _a1_clock["runs"] += 1
    if _a1_clock["runs"] == len(A1_PS) * 2:
        _announce(
            "A1 oracle equivalence (all collectives, both transports)",
            _a1_clock["elapsed"] < A1_BUDGET_SECONDS,
            f"[{_a1_clock['elapsed']:.1f}s of {A1_BUDGET_SECONDS:.0f}s budget]",
        )


# --------------------------------------------------------------------------
# A2: algorithm cross-equivalence.


def _algorithm_outputs(kind, algorithm, case, p):
    def body(rt, rank):
        req = case.build_request(rank, "a")
        rt.post(req)
        return case.result_of(rank, req)

    configs = lambda: [BackendConfig("a", policy=AlgorithmPolicy({kind: algorithm}))]
    return collective_world(p, body, configs=configs, timeout=30.0)


def test_A2_algorithm_cross_equivalence():
    checks = 0
    for p in (3, 4, 5):  # includes non-powers of two
        for count in (7, 64):  # not divisible by p
            for dtype in (DType.i64, DType.f32):
                case = make_case(CommOpKind.all_reduce, dtype, count, p,
                                 seed=p * 100 + count)
                outs = {
                    algo: _algorithm_outputs(CommOpKind.all_reduce, algo, case, p)
                    for algo in ("ring", "recursive_doubling", "naive")
                }
                expected = case.expected()
                for algo, results in outs.items():
                    for rank in range(p):
                        assert_matches(case, results[rank], expected[rank],
                                       f"all_reduce/{algo}/p{p}/n{count}")
                if dtype is DType.i64:  # bit-exact across algorithms
                    for rank in range(p):
                        base = outs["naive"][rank]
                        for algo in ("ring", "recursive_doubling"):
                            np.testing.assert_array_equal(outs[algo][rank], base)
                checks += 1

            a2a = make_case(CommOpKind.all_to_all_single, DType.i64,
                            count, p, seed=p * 7 + count)
            a2a_outs = {
                algo: _algorithm_outputs(CommOpKind.all_to_all_single, algo, a2a, p)
                for algo in ("bruck", "pairwise_exchange", "naive")
            }
            expected = a2a.expected()
            for algo, results in a2a_outs.items():
                for rank in range(p):
                    np.testing.assert_array_equal(
                        results[rank], expected[rank],
                        err_msg=f"all_to_all/{algo}/p{p}/n{count}")
            checks += 1
    # 3 world sizes x 2 counts x (2 dtypes for all_reduce + 1 all_to_all)
    _announce("A2 algorithm cross-equivalence (ring=rd=naive, bruck=pairwise=naive)",
              checks == 18, f"[{checks} parameter points]")


# --------------------------------------------------------------------------
# A3: mixed-backend deadlock freedom, 200 seeded programs + injections.

A3_KINDS = [CommOpKind.all_reduce, CommOpKind.all_gather, CommOpKind.bcast,
            CommOpKind.all_to_all_single, CommOpKind.reduce_scatter]


def test_A3_mixed_backend_deadlock_freedom():
    p = 4
    n_programs = 200
    program_budget = 10.0

    def entry(rt, rank):
        rt.init([BackendConfig("a"), BackendConfig("b")])
        failures = []
        for seed in range(n_programs):
            rng = random.Random(seed)
            n_ops = rng.randint(3, 8)
            ops = []
            for i in range(n_ops):
                kind = rng.choice(A3_KINDS)
                ops.append((
                    kind,
                    rng.choice(["a", "b"]),
                    rng.choice([1, 4, 32]),
                    seed * 1000 + i,
                ))
            wait_order = list(range(n_ops))
            rng.shuffle(wait_order)

            started = time.monotonic()
            cases = [make_case(kind, DType.i64, count, p, seed=s)
                     for kind, _b, count, s in ops]
            handles, reqs = [], []
            for (kind, backend, _c, _s), case in zip(ops, cases):
                req = case.build_request(rank, backend, async_op=True)
                handles.append(rt.post(req))
                reqs.append(req)
            for idx in wait_order:
                rt.wait(handles[idx])
            rt.synchronize(["a", "b"])
            elapsed = time.monotonic() - started
            if elapsed > program_budget:
                failures.append((seed, f"took {elapsed:.1f}s"))
                continue
            for case, req in zip(cases, reqs):
                got = case.result_of(rank, req)
                want = case.expected()[rank]
                try:
                    assert_matches(case, got, want)
                except AssertionError as exc:
                    failures.append((seed, str(exc)))
        rt.finalize()
        return failures

    results = world(p, entry, timeout=10.0, join_timeout=600.0)
    all_failures = [f for fs in results for f in fs]
    _announce("A3 deadlock freedom (200 seeded mixed-backend programs)",
              not all_failures, f"[failures: {all_failures[:3]}]")


def test_A3_injected_order_mismatch():
    p = 4
    injections = 5

    def entry(rt, rank):
        rt.init([BackendConfig("a"), BackendConfig("b")])
        observed = 0
        for trial in range(injections):
            buf = Buffer.from_values(DType.f32, [1.0])
            victim = trial % 2  # the rank that posts the wrong kind
            try:
                if rank == victim:
                    rt.bcast("a", buf, root=victim)
                else:
                    rt.all_reduce("a", buf)
            except OrderMismatch:
                observed += 1
            # after the verdict the lanes stay usable:
            ok = Buffer.from_values(DType.i64, [1])
            rt.all_reduce("a", ok)
            assert ok.array[0] == p
        rt.finalize()
        return observed

    started = time.monotonic()
    results = world(p, entry, timeout=10.0, join_timeout=120.0)
    elapsed = time.monotonic() - started
    _announce("A3 injected order mismatches (all ranks observe, no hang)",
              all(obs == injections for obs in results) and elapsed < 60.0,
              f"[{injections} injections, {elapsed:.1f}s]")


# --------------------------------------------------------------------------
# A4: mixed demo equals a single-backend oracle run.


@pytest.mark.parametrize("p", [2, 4])
def test_A4_mixed_demo(p):
    def entry(rt, rank):
        rt.init([BackendConfig("x"), BackendConfig("y")])
        outcome = run_mixed_demo(rt, "x", "y", count=2048, seed=77)
        rt.finalize()
        return outcome

    results = world(p, entry)
    ok = all(r["status"] == "ok" and r["max_rel_err"] <= 1e-6 for r in results)
    _announce(f"A4 mixed-backend demo reproduction (p={p})", ok,
              f"[max rel err {max(r['max_rel_err'] for r in results):.2e}]")


# --------------------------------------------------------------------------
# A5: tuning crossover + grid size formula.


def test_A5_tuning_crossover():
    sizes = [2**k for k in range(2, 18)]  # 4B..128KiB, 16 sizes

    def body(rt, rank):
        config = BenchConfig(ops=[CommOpKind.all_reduce], sizes=sizes,
                             warmup_iters=3, measure_iters=25)
        samples, _ = bench(rt, config)
        return samples

    configs = lambda: [
        BackendConfig("a", shape=CostShape(100e-6, 1e-9),
                      policy=AlgorithmPolicy(
                          {CommOpKind.all_reduce: "recursive_doubling"})),
        BackendConfig("b", shape=CostShape(10e-6, 10e-9),
                      policy=AlgorithmPolicy(
                          {CommOpKind.all_reduce: "recursive_doubling"})),
    ]

    def attempt():
        samples = collective_world(2, body, configs=configs, timeout=60.0,
                                   join_timeout=300.0)[0]
        table = build_table(samples)
        entries = table.tables[CommOpKind.all_reduce][2]
        picks = {s: next(e.backend for e in entries if s <= e.max_bytes)
                 for s in sizes}
        # Analytic crossover at 10000 B; one-bucket slack at the 8192/16384
        # boundary, single flip.
        ok = all(picks[s] == "b" for s in sizes if s <= 4096)
        ok = ok and all(picks[s] == "a" for s in sizes if s >= 32768)
        flips = sum(picks[a] != picks[b] for a, b in zip(sizes, sizes[1:]))
        return ok and flips == 1, [(e.max_bytes, e.backend) for e in entries]

    # Wall-clock criterion on a shared desk machine: allow retries against
    # CPU-steal bursts; the capability claim fails only if every attempt does.
    details = []
    ok = False
    for _ in range(3):
        ok, entries = attempt()
        details.append(entries)
        if ok:
            break
    _announce("A5 tuning crossover (B below 8192, A above 16384, 1-bucket slack)",
              ok, f"[attempts {details}]")


def test_A5_grid_size_formula():
    ops = [CommOpKind.all_reduce, CommOpKind.all_gather, CommOpKind.bcast,
           CommOpKind.reduce_scatter, CommOpKind.all_to_all_single]
    sizes = [2**k for k in range(2, 18)]
    scales = [2, 3, 4]
    all_samples, all_skipped = [], []
    for scale in scales:
        def body(rt, rank):
            config = BenchConfig(ops=ops, sizes=sizes, warmup_iters=0,
                                 measure_iters=3)
            return bench(rt, config)

        samples, skipped = collective_world(
            scale, body,
            configs=lambda: [BackendConfig("a"), BackendConfig("b")],
            timeout=60.0, join_timeout=300.0,
        )[0]
        all_samples.extend(samples)
        all_skipped.extend(skipped)
    grid = winner_grid(all_samples, "median", all_skipped)
    want = len(ops) * len(scales) * len(sizes)
    _announce("A5 pre-merge grid equals collectives x scales x sizes",
              len(grid) == want == 240, f"[{len(grid)} == {want}]")


# --------------------------------------------------------------------------
# A6: published all_gather table routes the three size bands.


def test_A6_table_routing(tmp_path):
    rows = [(256, "mv2-gdr"), (512, "mv2-gdr"), (1024, "mv2-gdr"),
            (2048, "mv2-gdr"), (4096, "nccl"), (8192, "nccl"),
            (16384, "sccl"), (32768, "sccl")]
    doc = {"version": 1, "system": "published-example", "tables": {
        "all_gather": {"64": [{"max_bytes": s, "backend": b} for s, b in rows]}
    }}
    path = tmp_path / "table.json"
    path.write_text(json.dumps(doc))
    table = load_table(str(path))
    registered = ["mv2-gdr", "nccl", "sccl"]
    ok = True
    for size in (256, 512, 1024, 2048):
        ok = ok and route(table, CommOpKind.all_gather, 64, size, registered) == "mv2-gdr"
    for size in (4096, 8192):
        ok = ok and route(table, CommOpKind.all_gather, 64, size, registered) == "nccl"
    for size in (16384, 32768):
        ok = ok and route(table, CommOpKind.all_gather, 64, size, registered) == "sccl"
    _announce("A6 published table routes the three all_gather bands", ok)


# --------------------------------------------------------------------------
# A7: fusion cap and timeout semantics.


def test_A7_fusion():
    p = 2
    n_req = 64
    rng = np.random.default_rng(5)
    vals = [[rng.standard_normal(64).astype(np.float32) for _ in range(n_req)]
            for _ in range(p)]

    def run(fusion):
        def body(rt, rank):
            bufs = [Buffer(vals[rank][i].copy()) for i in range(n_req)]
            handles = [rt.all_reduce("f", b, async_op=True) for b in bufs]
            for h in handles:
                rt.wait(h)
            return ([b.array.copy() for b in bufs],
                    rt._instance("f").collectives_executed)

        configs = lambda: [BackendConfig("f", fusion=fusion)]
        return collective_world(p, body, configs=configs, timeout=20.0)

    fused = run(FusionConfig(max_bytes=8192, max_wait=0.5))
    unfused = run(None)
    collectives = max(r[1] for r in fused)
    equal = all(
        np.allclose(f, u, rtol=1e-6, atol=1e-6)
        for (f_outs, _), (u_outs, _) in zip(fused, unfused)
        for f, u in zip(f_outs, u_outs)
    )

    # Lone request flushes within T + slack.
    T, slack = 0.005, 0.050

    def lone_body(rt, rank):
        buf = Buffer.from_values(DType.f32, [float(rank)])
        t0 = time.monotonic()
        h = rt.all_reduce("f", buf, async_op=True)
        rt.wait(h)
        return time.monotonic() - t0, buf.array[0]

    lone = collective_world(
        p, lone_body,
        configs=lambda: [BackendConfig(
            "f", fusion=FusionConfig(max_bytes=1 << 20, max_wait=T))],
        timeout=20.0,
    )
    lone_ok = all(e <= T + slack and v == 1.0 for e, v in lone)
    _announce(
        "A7 fusion (64x256B, B=8192 -> <=2 collectives, unfused-equal; "
        "T flush within slack)",
        collectives <= 2 and equal and lone_ok,
        f"[collectives={collectives}, lone={max(e for e, _ in lone) * 1e3:.1f}ms]",
    )


# --------------------------------------------------------------------------
# A8: dispatch overhead vs direct backend invocation.


def test_A8_dispatch_overhead():
    """Full dispatch path (validate + auto-route + runtime indirection)
    against posting the same collective directly on the backend object.
    End-to-end time means the slowest rank, so per-iteration durations are
    max-reduced across ranks before taking medians."""
    p = 4
    count = ((1 << 20) // 4 // p) * p  # 1 MiB of f32 per rank
    iters = 100

    def entry(rt, rank):
        rt.init([BackendConfig("a")])
        from mcrdl.dispatch import TuningTable

        rt.tuning_table = TuningTable.from_dict({"tables": {
            "all_to_all_single": {str(p): [{"max_bytes": 1 << 30, "backend": "a"}]}
        }})
        instance = rt._instance("a")
        rng = np.random.default_rng(rank)
        data = rng.standard_normal(count).astype(np.float32)

        def barrier():
            b = Buffer.zeros(DType.f32, 0)
            rt.post(CommRequest(CommOpKind.all_reduce, input=b, output=b,
                                op=ReduceOp.sum, backend="a"))

        def direct_once():
            req = CommRequest(CommOpKind.all_to_all_single,
                              input=Buffer(data.copy()),
                              output=Buffer.zeros(DType.f32, count), backend="a")
            barrier()
            t0 = time.perf_counter()
            instance.post(req)
            return time.perf_counter() - t0

        def dispatch_once():
            req = CommRequest(CommOpKind.all_to_all_single,
                              input=Buffer(data.copy()),
                              output=Buffer.zeros(DType.f32, count),
                              backend="auto")
            barrier()
            t0 = time.perf_counter()
            rt.post(req)
            return time.perf_counter() - t0

        for _ in range(3):
            direct_once(), dispatch_once()
        direct = np.zeros(iters)
        dispatched = np.zeros(iters)
        for it in range(iters):
            # Alternate the pair order so noise bursts cannot align with
            # one path's slots.
            if it % 2 == 0:
                direct[it] = direct_once()
                dispatched[it] = dispatch_once()
            else:
                dispatched[it] = dispatch_once()
                direct[it] = direct_once()
        for arr in (direct, dispatched):
            shared = Buffer(arr)
            rt.post(CommRequest(CommOpKind.all_reduce, input=shared, output=shared,
                                op=ReduceOp.max, backend="a"))
        rt.finalize()
        return statistics.median(direct), statistics.median(dispatched)

    ratios = []
    for _ in range(3):  # wall-clock criterion: retry CPU-steal bursts
        results = world(p, entry, timeout=60.0, join_timeout=300.0)
        d_direct, d_dispatch = results[0]
        ratios.append(d_dispatch / d_direct)
        if ratios[-1] <= 1.05:
            break
        time.sleep(2.0)
    _announce("A8 dispatch overhead <= 1.05x direct (1 MiB all_to_all, 100 iters)",
              ratios[-1] <= 1.05,
              "[ratio " + ", ".join(f"{r:.3f}" for r in ratios) + "]")


# --------------------------------------------------------------------------
# A9: overlap of communication and compute.


def test_A9_overlap():
    alpha, compute = 0.050, 0.040
    trials = 5

    def entry(rt, rank):
        rt.init([BackendConfig(
            "s", shape=CostShape(alpha, 0),
            policy=AlgorithmPolicy({CommOpKind.all_reduce: "recursive_doubling"}),
        )])
        for _ in range(2):
            rt.all_reduce("s", Buffer.zeros(DType.f32, 4))
        overlapped, serial = [], []
        for _ in range(trials):
            buf = Buffer.from_values(DType.f32, [float(rank)])
            t0 = time.monotonic()
            h = rt.all_reduce("s", buf, async_op=True)
            time.sleep(compute)
            rt.wait(h)
            overlapped.append(time.monotonic() - t0)

            buf2 = Buffer.from_values(DType.f32, [float(rank)])
            t0 = time.monotonic()
            rt.all_reduce("s", buf2)
            time.sleep(compute)
            serial.append(time.monotonic() - t0)
        rt.finalize()
        return statistics.median(overlapped), statistics.median(serial)

    results = world(2, entry, timeout=60.0, join_timeout=300.0)
    worst_overlap = max(r[0] for r in results)
    best_serial = min(r[1] for r in results)
    _announce("A9 overlap (async+40ms compute < 75ms; blocking >= 90ms)",
              worst_overlap < 0.075 and best_serial >= 0.090,
              f"[async {worst_overlap * 1e3:.1f}ms, blocking {best_serial * 1e3:.1f}ms]")


# --------------------------------------------------------------------------
# A10: report correctness over synthetic multi-rank logs.


def test_A11_bindings_parity():
    """[SECONDARY] The foreign client's suite covers bindings parity: it
    replays the selftest parity dump, runs the overlapped two-backend
    program, checks error-kind mapping, and joins a mixed Python/TS world.
    Bridged here when the frontend is installed; skipped otherwise."""
    import os
    import subprocess

    frontend = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))),
                            "frontend")
    if not os.path.isdir(os.path.join(frontend, "node_modules")):
        pytest.skip("frontend/node_modules not installed; run npm install there")
    proc = subprocess.run(
        ["npx", "vitest", "run"], cwd=frontend, capture_output=True, text=True,
        timeout=600,
    )
    _announce("A11 bindings parity (frontend vitest suite)", proc.returncode == 0,
              f"[{proc.stdout.splitlines()[-3:] if proc.returncode else 'all green'}]")


def test_A10_report_correctness(tmp_path):
    rng = np.random.default_rng(9)
    ops = ["all_reduce", "all_to_all", "bcast"]
    backends = ["x", "y"]
    paths = []
    hand_sum: dict = {}
    per_event: dict = {}
    for rank in range(4):
        records = []
        for seq in range(50):
            op = ops[seq % len(ops)]
            backend = backends[seq % len(backends)]
            dur = float(rng.uniform(10, 500))
            records.append(LogRecord(seq, rank, op, backend, 64, dur, seq, False))
            hand_sum[(op, backend)] = hand_sum.get((op, backend), 0.0) + dur
            key = (backend, seq, op)
            per_event[key] = max(per_event.get(key, 0.0), dur)
        path = tmp_path / f"rank{rank}.jsonl"
        with open(path, "w") as fh:
            for rec in records:
                fh.write(rec.to_json() + "\n")
        paths.append(str(path))

    hand_max: dict = {}
    for (backend, _seq, op), dur in per_event.items():
        hand_max[(op, backend)] = hand_max.get((op, backend), 0.0) + dur

    ok = True
    for view, oracle in (("sum", hand_sum), ("max", hand_max)):
        breakdown = report(paths, view=view)
        ok = ok and abs(sum(r.percent for r in breakdown.rows) - 100.0) <= 0.1
        got = {(r.op, r.backend): r.total_us for r in breakdown.rows}
        for key, want in oracle.items():
            ok = ok and abs(got[key] - want) < 1e-6 * max(want, 1.0)
        total = sum(oracle.values()) / 1e6
        ok = ok and abs(breakdown.total_seconds - total) < 1e-9
    _announce("A10 report percentages sum to 100 +/- 0.1 and match hand oracle", ok)
