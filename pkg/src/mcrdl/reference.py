"""Sequential single-process reference semantics for every collective.

Each function takes per-rank numpy inputs and returns per-rank outputs,
computed with plain loops in ascending rank order. selftest and the mixed
demo check live results against these; they share no code with the
transport-backed algorithms.
"""

from __future__ import annotations

import numpy as np

from .core import ReduceOp


def _fold(arrays: list[np.ndarray], op: ReduceOp) -> np.ndarray:
    acc = arrays[0].copy()
    for arr in arrays[1:]:
        acc = op.apply(acc, arr)
    return acc


def all_reduce(inputs: list[np.ndarray], op: ReduceOp) -> list[np.ndarray]:
    total = _fold(inputs, op)
    return [total.copy() for _ in inputs]


def reduce(inputs: list[np.ndarray], op: ReduceOp, root: int) -> list[np.ndarray]:
    out = [np.empty(0, dtype=inputs[0].dtype) for _ in inputs]
    out[root] = _fold(inputs, op)
    return out


def bcast(inputs: list[np.ndarray], root: int) -> list[np.ndarray]:
    return [inputs[root].copy() for _ in inputs]


def all_gather(inputs: list[np.ndarray]) -> list[np.ndarray]:
    packed = np.concatenate(inputs)
    return [packed.copy() for _ in inputs]


def all_gatherv(
    inputs: list[np.ndarray], rcounts: list[int], displs: list[int]
) -> list[np.ndarray]:
    total = sum(rcounts)
    packed = np.zeros(total, dtype=inputs[0].dtype)
    for r, arr in enumerate(inputs):
        packed[displs[r] : displs[r] + rcounts[r]] = arr
    return [packed.copy() for _ in inputs]


def gather(inputs: list[np.ndarray], root: int) -> list[np.ndarray]:
    out = [np.empty(0, dtype=inputs[0].dtype) for _ in inputs]
    out[root] = np.concatenate(inputs)
    return out


def gatherv(
    inputs: list[np.ndarray], root: int, rcounts: list[int], displs: list[int]
) -> list[np.ndarray]:
    out = [np.empty(0, dtype=inputs[0].dtype) for _ in inputs]
    packed = np.zeros(sum(rcounts), dtype=inputs[0].dtype)
    for r, arr in enumerate(inputs):
        packed[displs[r] : displs[r] + rcounts[r]] = arr
    out[root] = packed
    return out


def scatter(root_input: np.ndarray, root: int, world_size: int) -> list[np.ndarray]:
    m = root_input.shape[0] // world_size
    return [root_input[r * m : (r + 1) * m].copy() for r in range(world_size)]


def scatterv(
    root_input: np.ndarray, scounts: list[int], displs: list[int]
) -> list[np.ndarray]:
    return [
        root_input[displs[r] : displs[r] + scounts[r]].copy()
        for r in range(len(scounts))
    ]


def reduce_scatter(inputs: list[np.ndarray], op: ReduceOp) -> list[np.ndarray]:
    p = len(inputs)
    total = _fold(inputs, op)
    m = total.shape[0] // p
    return [total[r * m : (r + 1) * m].copy() for r in range(p)]


def all_to_all_single(inputs: list[np.ndarray]) -> list[np.ndarray]:
    p = len(inputs)
    m = inputs[0].shape[0] // p
    return [
        np.concatenate([inputs[j][r * m : (r + 1) * m] for j in range(p)])
        for r in range(p)
    ]


def all_to_all(inputs: list[list[np.ndarray]]) -> list[list[np.ndarray]]:
    p = len(inputs)
    return [[inputs[j][r].copy() for j in range(p)] for r in range(p)]


def all_to_allv(
    inputs: list[np.ndarray],
    scounts: list[list[int]],
    sdispls: list[list[int]],
    rdispls: list[list[int]],
) -> list[np.ndarray]:
    p = len(inputs)
    outputs = []
    for r in range(p):
        total = sum(scounts[j][r] for j in range(p))
        out = np.zeros(
            max(total, max((rdispls[r][j] + scounts[j][r]) for j in range(p)) if p else 0),
            dtype=inputs[0].dtype,
        )
        for j in range(p):
            c = scounts[j][r]
            out[rdispls[r][j] : rdispls[r][j] + c] = inputs[j][
                sdispls[j][r] : sdispls[j][r] + c
            ]
        outputs.append(out)
    return outputs
