import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mcrdl import AlgorithmPolicy, BackendConfig, run_thread_world
from mcrdl.runtime import Runtime


def world(p, entry, *, timeout=15.0, tcp=False, join_timeout=120.0):
    """Thread-rank world; entry(rt, rank) initializes its own backends."""
    return run_thread_world(
        p, entry, timeout=timeout, tcp=tcp, join_timeout=join_timeout
    )


def collective_world(p, body, *, configs=None, tcp=False, timeout=15.0,
                     join_timeout=120.0):
    """World whose entry initializes the given backend configs (default: one
    inproc backend "a"), runs body(rt, rank), finalizes, and returns the
    per-rank results."""

    def entry(rt: Runtime, rank: int):
        cfgs = configs() if callable(configs) else configs
        if cfgs is None:
            cfgs = [BackendConfig("a", transport="tcp" if tcp else "inproc")]
        rt.init(cfgs)
        try:
            return body(rt, rank)
        finally:
            rt.finalize()

    return world(p, entry, timeout=timeout, tcp=tcp, join_timeout=join_timeout)


def policy_configs(name, transport, **overrides):
    return [BackendConfig(name, transport=transport,
                          policy=AlgorithmPolicy(overrides or None))]


@pytest.fixture(scope="session")
def acceptance_report():
    lines = []
    yield lines
    print()
    for line in lines:
        print(line)
