"""Interop partner: joins a 2-rank tcp world as rank 0 (Python side) and
runs the fixed case program mirrored by the TypeScript interop test.

Prints a JSON object with this rank's view of every case result; exits
nonzero if any local expectation fails.
"""

import argparse
import json
import sys

import numpy as np

from mcrdl import AlgorithmPolicy, BackendConfig, Buffer, DType, ReduceOp, Runtime


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--rank", type=int, required=True)
    parser.add_argument("--world", type=int, default=2)
    parser.add_argument("--master-port", type=int, required=True)
    args = parser.parse_args()

    rank, p = args.rank, args.world
    rt = Runtime(rank, p, master_addr="127.0.0.1", timeout=20.0)
    rt.init([
        BackendConfig("x", transport="tcp", policy=AlgorithmPolicy.naive(),
                      master_port=args.master_port),
        BackendConfig("y", transport="tcp", policy=AlgorithmPolicy.naive(),
                      master_port=args.master_port + 1),
    ])

    out: dict = {}
    failures: list[str] = []

    def record(name, got, want=None):
        values = got.array.tolist() if isinstance(got, Buffer) else list(got)
        out[name] = values
        if want is not None and values != want:
            failures.append(f"{name}: got {values}, want {want}")

    # 1. all_reduce sum i64
    buf = Buffer.from_values(DType.i64, [rank + 1, 10 * (rank + 1)])
    rt.all_reduce("x", buf, ReduceOp.sum)
    record("allreduce_i64", buf, [3, 30])

    # 2. all_reduce sum f32
    buf = Buffer.from_values(DType.f32, [0.5 + rank, 2.5 * (rank + 1)])
    rt.all_reduce("x", buf, ReduceOp.sum)
    record("allreduce_f32", buf, [2.0, 7.5])

    # 3. bcast f32 root 0
    buf = (Buffer.from_values(DType.f32, [3.25, -1.5]) if rank == 0
           else Buffer.zeros(DType.f32, 2))
    rt.bcast("x", buf, root=0)
    record("bcast_f32", buf, [3.25, -1.5])

    # 4. reduce prod i64 root 1
    buf = Buffer.from_values(DType.i64, [rank + 2, 3])
    rt.reduce("x", buf, root=1, op=ReduceOp.prod)
    record("reduce_prod", buf, [6, 9] if rank == 1 else None)

    # 5. gather i64 root 0
    inp = Buffer.from_values(DType.i64, [100 + rank])
    gout = Buffer.zeros(DType.i64, p) if rank == 0 else None
    rt.gather("x", gout, inp, root=0)
    record("gather", gout if gout is not None else [], [100, 101] if rank == 0 else None)

    # 6. gatherv i64 root 1, counts [2, 1]
    inp = Buffer.from_values(DType.i64, [11, 12] if rank == 0 else [21])
    gout = Buffer.zeros(DType.i64, 3) if rank == 1 else None
    rt.gatherv("x", gout, inp, root=1, rcounts=[2, 1], displs=[0, 2])
    record("gatherv", gout if gout is not None else [],
           [11, 12, 21] if rank == 1 else None)

    # 7. scatter f32 root 0
    src = Buffer.from_values(DType.f32, [1.5, 2.5]) if rank == 0 else None
    sout = Buffer.zeros(DType.f32, 1)
    rt.scatter("x", sout, src, root=0)
    record("scatter", sout, [[1.5], [2.5]][rank])

    # 8. scatterv f32 root 1, counts [1, 2]
    src = Buffer.from_values(DType.f32, [9.0, 8.0, 7.0]) if rank == 1 else None
    sout = Buffer.zeros(DType.f32, [1, 2][rank])
    rt.scatterv("x", sout, src, root=1, scounts=[1, 2], displs=[0, 1])
    record("scatterv", sout, [[9.0], [8.0, 7.0]][rank])

    # 9. all_gather i64
    agout = Buffer.zeros(DType.i64, p)
    rt.all_gather("x", agout, Buffer.from_values(DType.i64, [rank]))
    record("allgather", agout, [0, 1])

    # 10. all_gatherv f32, counts [2, 1]
    inp = Buffer.from_values(DType.f32, [5.0, 6.0] if rank == 0 else [7.0])
    avout = Buffer.zeros(DType.f32, 3)
    rt.all_gatherv("x", avout, inp, rcounts=[2, 1], displs=[0, 2])
    record("allgatherv", avout, [5.0, 6.0, 7.0])

    # 11. reduce_scatter sum i64
    inp = Buffer.from_values(DType.i64, [rank, rank + 1, rank + 2, rank + 3])
    rsout = Buffer.zeros(DType.i64, 2)
    rt.reduce_scatter("x", rsout, inp, ReduceOp.sum)
    record("reduce_scatter", rsout, [[1, 3], [5, 7]][rank])

    # 12. all_to_all_single i64
    inp = Buffer.from_values(DType.i64, [[1, 2], [3, 4]][rank])
    a2aout = Buffer.zeros(DType.i64, 2)
    rt.all_to_all_single("x", a2aout, inp)
    record("alltoall_single", a2aout, [[1, 3], [2, 4]][rank])

    # 13. all_to_all list f32, blocks of 2
    ins = [Buffer.from_values(DType.f32, [10 * rank + j, 10 * rank + j + 5])
           for j in range(p)]
    outs = [Buffer.zeros(DType.f32, 2) for _ in range(p)]
    rt.all_to_all("x", outs, ins)
    flat = [v for b in outs for v in b.array.tolist()]
    want = [[0.0, 5.0, 10.0, 15.0], [1.0, 6.0, 11.0, 16.0]][rank]
    out["alltoall_list"] = flat
    if flat != want:
        failures.append(f"alltoall_list: got {flat}, want {want}")

    # 14. all_to_allv i64, sc = [[1, 2], [2, 1]]
    sc = [[1, 2], [2, 1]]
    inp = Buffer.from_values(DType.i64, [[1, 2, 3], [4, 5, 6]][rank])
    rcounts = [sc[j][rank] for j in range(p)]
    avout = Buffer.zeros(DType.i64, sum(rcounts))
    sdispls = [0, sc[rank][0]]
    rdispls = [0, rcounts[0]]
    rt.all_to_allv("x", avout, inp, scounts=sc[rank], rcounts=rcounts,
                   sdispls=sdispls, rdispls=rdispls)
    record("alltoallv", avout, [[1, 4, 5], [2, 3, 6]][rank])

    # 15. send/recv ping-pong (rank 0 sends, rank 1 echoes +1)
    if rank == 0:
        rt.send("x", Buffer.from_values(DType.i64, [42, 43]), peer=1)
        back = Buffer.zeros(DType.i64, 2)
        rt.recv("x", back, peer=1)
        record("pingpong", back, [43, 44])
    else:
        got = Buffer.zeros(DType.i64, 2)
        rt.recv("x", got, peer=0)
        rt.send("x", Buffer(got.array + 1), peer=0)
        record("pingpong", got, [42, 43])

    # 16. overlapped two-backend program (one all_reduce per backend plus
    # local compute, then combine)
    a = Buffer.from_values(DType.f32, [float(rank + 1)] * 4)
    b = Buffer.from_values(DType.f32, [float(5 * (rank + 1))] * 4)
    z = np.full(4, rank + 10, dtype=np.float32)
    h1 = rt.all_reduce("x", a, ReduceOp.sum, async_op=True)
    h2 = rt.all_reduce("y", b, ReduceOp.sum, async_op=True)
    z = z + z
    rt.wait(h1)
    rt.wait(h2)
    result = (a.array + b.array + z).tolist()
    out["mixed"] = result
    want = [38.0 + 2 * rank] * 4
    if result != want:
        failures.append(f"mixed: got {result}, want {want}")

    rt.finalize()
    out["failures"] = failures
    print(json.dumps(out))
    return 0 if not failures else 1


if __name__ == "__main__":
    sys.exit(main())
