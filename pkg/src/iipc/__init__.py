"""Execution-guided program-refinement reasoning engine and benchmark harness."""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    Budget,
    CotTrace,
    ErrorDescriptor,
    ErrorKind,
    ExecutionOutput,
    HaltReason,
    Problem,
    Program,
    ProgramStore,
    PropositionSet,
    ReflectionMemory,
    TokenUsage,
    TraceRecord,
    Verdict,
    VerifyMethod,
    classify,
)
from .refine import Engine, RunConfig, Variant, run_full  # noqa: F401
