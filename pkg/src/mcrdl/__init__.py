"""mcrdl: a mix-and-match collective communication runtime.

One unified operation surface over pluggable transport backends, with
non-blocking work handles, vectored collectives, deadlock-free
mixed-backend execution, an "auto" backend driven by tuning tables, and
fusion/compression/logging middleware.
"""

from . import errors
from .collectives import AlgorithmPolicy
from .core import (
    Buffer,
    CommOpKind,
    CommRequest,
    CompletionEvent,
    DType,
    ReduceOp,
    WorkHandle,
    element_reduce,
    validate,
)
from .dispatch import TuningTable, load_table, message_bytes, route
from .local import run_thread_world
from .middleware import CommLog, CompressionConfig, FusionConfig, LogRecord
from .runtime import BackendConfig, Runtime
from .transport import CostShape, InprocFabric, RankAddressBook, bootstrap

__version__ = "0.1.0"

__all__ = [
    "AlgorithmPolicy",
    "BackendConfig",
    "Buffer",
    "CommLog",
    "CommOpKind",
    "CommRequest",
    "CompletionEvent",
    "CompressionConfig",
    "CostShape",
    "DType",
    "FusionConfig",
    "InprocFabric",
    "LogRecord",
    "RankAddressBook",
    "ReduceOp",
    "Runtime",
    "TuningTable",
    "WorkHandle",
    "bootstrap",
    "element_reduce",
    "errors",
    "load_table",
    "message_bytes",
    "route",
    "run_thread_world",
    "validate",
]
