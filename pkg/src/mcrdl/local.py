"""Desk-scale world launchers.

Thread mode runs every rank as a thread of this process over an inproc
fabric (or over real localhost sockets when the entry initializes tcp
backends); process mode is handled by the CLI, which re-execs itself with
the rank environment set.
"""

from __future__ import annotations

import sys
import threading
from typing import Callable, Optional

from .errors import CommTimeout
from .runtime import Runtime
from .transport import InprocFabric, free_port

# Rank threads trade many small messages; the default 5 ms GIL slice adds
# that much tail latency to every cross-thread handoff.
_GIL_SWITCH_INTERVAL = 0.0002


def run_thread_world(
    world_size: int,
    entry: Callable[[Runtime, int], object],
    *,
    timeout: Optional[float] = None,
    join_timeout: float = 120.0,
    tcp: bool = False,
) -> list:
    """Run ``entry(runtime, rank)`` on world_size rank-threads and return
    their results ordered by rank. The entry initializes its own backends;
    exceptions propagate (first rank's error, with .rank_errors attached)."""
    if sys.getswitchinterval() > _GIL_SWITCH_INTERVAL:
        sys.setswitchinterval(_GIL_SWITCH_INTERVAL)
    fabric = InprocFabric(world_size)
    master_port = free_port() if tcp else 0
    results: list = [None] * world_size
    errors: dict[int, BaseException] = {}

    def runner(rank: int) -> None:
        rt = Runtime(
            rank,
            world_size,
            fabric=fabric,
            master_port=master_port,
            timeout=timeout,
        )
        try:
            results[rank] = entry(rt, rank)
        except BaseException as exc:  # noqa: BLE001 - re-raised below
            errors[rank] = exc
        finally:
            rt.close()

    threads = [
        threading.Thread(target=runner, args=(rank,), name=f"rank-{rank}", daemon=True)
        for rank in range(world_size)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join(join_timeout)
    stuck = [t.name for t in threads if t.is_alive()]
    if stuck:
        raise CommTimeout(f"ranks did not finish within {join_timeout}s: {stuck}")
    if errors:
        first = errors[min(errors)]
        first.rank_errors = errors  # type: ignore[attr-defined]
        raise first
    return results
