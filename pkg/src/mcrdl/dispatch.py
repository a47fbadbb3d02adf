"""The "auto" backend: routes each request to a concrete backend through a
static tuning table keyed by (operation, world size, message size).

Table file schema (JSON):

    {"version": 1, "system": "<label>",
     "tables": {"<op>": {"<world_size>": [{"max_bytes": N, "backend": "id"}, ...]}}}

Entries are ordered by strictly increasing max_bytes; the first entry with
max_bytes >= message size wins. Larger messages than the last threshold use
the last entry. Untuned world sizes fall back to the nearest smaller tuned
world for that op, then to the default (first registered) backend.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

from .core import Buffer, CommOpKind, CommRequest
from .errors import IoError, MonotonicityError, ParseError, UnroutableRequest

logger = logging.getLogger(__name__)

# Power-of-two message-size buckets from 4 B to 64 MiB.
SIZE_BUCKETS: tuple[int, ...] = tuple(2**k for k in range(2, 27))


def bucket(nbytes: int) -> int:
    """Smallest bucket boundary >= nbytes; sizes beyond 64 MiB map to the
    top bucket."""
    for boundary in SIZE_BUCKETS:
        if nbytes <= boundary:
            return boundary
    return SIZE_BUCKETS[-1]


@dataclass(frozen=True)
class TableEntry:
    max_bytes: int
    backend: str


class TuningTable:
    def __init__(
        self,
        tables: dict[CommOpKind, dict[int, list[TableEntry]]],
        *,
        version: int = 1,
        system: str = "",
    ):
        self.version = version
        self.system = system
        self.tables = tables
        self._validate()

    def _validate(self) -> None:
        for kind, worlds in self.tables.items():
            for world, entries in worlds.items():
                if not entries:
                    raise ParseError(f"{kind.value}/{world}: empty entry list")
                for a, b in zip(entries, entries[1:]):
                    if b.max_bytes <= a.max_bytes:
                        raise MonotonicityError(
                            f"{kind.value}/{world}: max_bytes must strictly "
                            f"increase ({a.max_bytes} then {b.max_bytes})"
                        )

    @staticmethod
    def merge_runs(entries: list[TableEntry]) -> list[TableEntry]:
        """Collapse adjacent entries naming the same backend, keeping the
        largest threshold of each run."""
        merged: list[TableEntry] = []
        for entry in entries:
            if merged and merged[-1].backend == entry.backend:
                merged[-1] = TableEntry(entry.max_bytes, entry.backend)
            else:
                merged.append(entry)
        return merged

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "system": self.system,
            "tables": {
                kind.value: {
                    str(world): [
                        {"max_bytes": e.max_bytes, "backend": e.backend}
                        for e in entries
                    ]
                    for world, entries in sorted(worlds.items())
                }
                for kind, worlds in self.tables.items()
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TuningTable":
        try:
            tables: dict[CommOpKind, dict[int, list[TableEntry]]] = {}
            for op_name, worlds in doc.get("tables", {}).items():
                kind = CommOpKind(op_name)
                tables[kind] = {}
                for world_str, raw_entries in worlds.items():
                    entries = [
                        TableEntry(int(e["max_bytes"]), str(e["backend"]))
                        for e in raw_entries
                    ]
                    tables[kind][int(world_str)] = cls.merge_runs(entries)
            return cls(
                tables,
                version=int(doc.get("version", 1)),
                system=str(doc.get("system", "")),
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise ParseError(f"malformed tuning table: {exc}") from None
        except ValueError as exc:
            raise ParseError(f"malformed tuning table: {exc}") from None

    def entry_count(self) -> int:
        return sum(
            len(entries) for worlds in self.tables.values() for entries in worlds.values()
        )

    def referenced_backends(self) -> set[str]:
        return {
            e.backend
            for worlds in self.tables.values()
            for entries in worlds.values()
            for e in entries
        }

    def lookup(self, kind: CommOpKind, world_size: int, nbytes: int) -> Optional[str]:
        """Backend named by the table, or None when the (op, world) key and
        every smaller tuned world are absent."""
        worlds = self.tables.get(kind)
        if not worlds:
            return None
        if world_size not in worlds:
            smaller = [w for w in worlds if w <= world_size]
            if not smaller:
                return None
            world_size = max(smaller)
        entries = worlds[world_size]
        for entry in entries:
            if nbytes <= entry.max_bytes:
                return entry.backend
        return entries[-1].backend


def load_table(path: str, known_backends: Optional[Sequence[str]] = None) -> TuningTable:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise IoError(str(exc)) from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    table = TuningTable.from_dict(doc)
    if known_backends is not None:
        unknown = table.referenced_backends() - set(known_backends)
        if unknown:
            logger.warning(
                "tuning table %s names unregistered backends: %s",
                path, ", ".join(sorted(unknown)),
            )
    return table


def save_table(table: TuningTable, path: str) -> None:
    try:
        with open(path, "w") as fh:
            json.dump(table.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoError(str(exc)) from None


def message_bytes(request: CommRequest, world_size: int) -> int:
    """Canonical message size: per-rank send-side payload bytes. Vectored
    ops sum their segments; rooted scatter counts the root's input so every
    rank routes identically."""
    kind = request.kind
    if kind in (CommOpKind.gatherv, CommOpKind.all_gatherv):
        return sum(request.rcounts) * request.input.dtype.size_bytes
    if kind is CommOpKind.scatterv:
        return sum(request.scounts) * request.output.dtype.size_bytes
    if kind is CommOpKind.all_to_allv:
        return sum(request.scounts) * request.input.dtype.size_bytes
    if kind is CommOpKind.all_to_all:
        return sum(b.nbytes for b in request.input)
    if kind is CommOpKind.scatter:
        return world_size * request.output.nbytes
    if kind in (CommOpKind.recv, CommOpKind.bcast, CommOpKind.reduce_scatter):
        return request.output.nbytes
    if isinstance(request.input, Buffer):
        return request.input.nbytes
    bufs = request.buffers()
    return bufs[0].nbytes if bufs else 0


def route(
    table: Optional[TuningTable],
    kind: CommOpKind,
    world_size: int,
    nbytes: int,
    registered: Sequence[str],
) -> str:
    """Resolve the "auto" backend. Pure: identical arguments always yield
    the same answer."""
    if not registered:
        raise UnroutableRequest("no backends registered")
    default = registered[0]
    choice = table.lookup(kind, world_size, nbytes) if table is not None else None
    if choice is None:
        return default
    if choice not in registered:
        raise UnroutableRequest(
            f"tuning table routes {kind.value}/{nbytes}B to unregistered "
            f"backend {choice!r}"
        )
    return choice
