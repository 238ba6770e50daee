"""Domain types shared by every other module.

Most types are immutable value objects; the mutable exceptions
(ReflectionMemory, ProgramStore, Budget) are the per-problem run state and
enforce their own append-only / monotonic invariants.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Optional

from .errors import InvariantViolation

logger = logging.getLogger(__name__)

TRACE_SCHEMA_VERSION = 1

MATH_SUBJECTS = (
    "Algebra",
    "Counting & Probability",
    "Geometry",
    "Intermediate Algebra",
    "Number Theory",
    "Prealgebra",
    "Precalculus",
)


class Source(str, Enum):
    MATH = "MATH"
    AIME = "AIME"
    GSM8K = "GSM8K"
    CUSTOM = "Custom"


class Origin(str, Enum):
    """How a candidate program came to exist."""

    INITIAL = "initial"
    VALIDATION = "validation"
    CORRECTION = "correction"


class Classification(str, Enum):
    OK = "ok"
    ERROR = "error"


class ErrorKind(str, Enum):
    RUNTIME = "runtime-error"
    TIMEOUT = "timeout"
    DISALLOWED_IMPORT = "disallowed-import"
    LOGIC_FLAW = "logic-flaw"
    FORMAT_FAILURE = "format-failure"


class Route(str, Enum):
    VALIDATE = "validate"
    CORRECT = "correct"


class Action(str, Enum):
    REVISED = "revised"
    STOPPED = "stopped"
    BUDGET_EXHAUSTED = "budget-exhausted"


class HaltReason(str, Enum):
    STOP_SIGNAL = "stop-signal"
    VALIDATION_BUDGET = "validation-budget"
    CORRECTION_BUDGET = "correction-budget"
    TOKEN_BUDGET = "token-budget"
    NO_PROGRAM = "no-program"


class VerifyMethod(str, Enum):
    EXACT_MATCH = "exact-match"
    INTEGER_MATCH = "integer-match"
    NUMERIC_TOLERANCE = "numeric-tolerance"
    SYMBOLIC_NORMALIZATION = "symbolic-normalization"
    LLM_JUDGE = "llm-judge"


@dataclass(frozen=True)
class Problem:
    id: str
    statement: str
    gold_answer: Optional[str] = None
    subject: Optional[str] = None
    level: Optional[int] = None
    source: Source = Source.CUSTOM

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("problem id must be non-empty")
        if not self.statement.strip():
            raise ValueError(f"problem {self.id}: statement must be non-empty")
        if self.level is not None and not 1 <= self.level <= 5:
            raise ValueError(f"problem {self.id}: level {self.level} outside [1, 5]")
        if self.subject is not None and self.subject not in MATH_SUBJECTS:
            raise ValueError(f"problem {self.id}: unknown subject {self.subject!r}")


@dataclass(frozen=True)
class PropositionSet:
    items: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.items:
            raise ValueError("proposition set must be non-empty")
        for item in self.items:
            if not item.strip():
                raise ValueError("propositions must be non-blank")

    def __iter__(self) -> Iterator[str]:
        return iter(self.items)

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class LintReport:
    disallowed_imports: tuple[str, ...] = ()
    comprehension_count: int = 0
    recursion_flags: tuple[str, ...] = ()
    has_verification_marker: bool = False
    print_count: int = 0
    parse_failed: bool = False

    def __post_init__(self) -> None:
        if self.comprehension_count < 0 or self.print_count < 0:
            raise ValueError("lint counts must be non-negative")


@dataclass(frozen=True)
class Program:
    index: int
    source: str
    lint: LintReport = field(default_factory=LintReport)
    origin: Origin = Origin.INITIAL

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValueError("program index starts at 1")
        if not self.source.strip():
            raise ValueError("program source must be non-empty")


_TRACEBACK_MARKER = "Traceback (most recent call last):"


def classify(
    exit_status: int, timed_out: bool, stderr: str = ""
) -> Classification:
    """Decide whether a captured execution belongs to the error set.

    Error iff the process exited non-zero, timed out, or left an uncaught
    exception traceback on stderr. Library warnings on stderr with a clean
    exit are not errors.
    """
    if exit_status != 0 or timed_out or _TRACEBACK_MARKER in stderr:
        return Classification.ERROR
    return Classification.OK


@dataclass(frozen=True)
class ExecutionOutput:
    stdout: str
    stderr: str
    exit_status: int
    wall_time: float
    timed_out: bool = False
    # Derived in __post_init__, never a free-floating label.
    classification: Classification = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(
            self,
            "classification",
            classify(self.exit_status, self.timed_out, self.stderr),
        )

    @property
    def ok(self) -> bool:
        return self.classification is Classification.OK


@dataclass(frozen=True)
class ErrorDescriptor:
    iteration: int
    kind: ErrorKind
    text: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("descriptor text must be non-empty")


class ReflectionMemory:
    """Append-only store of mistake descriptors; never shrinks within a run."""

    def __init__(self, descriptors: Optional[list[ErrorDescriptor]] = None):
        self._descriptors: list[ErrorDescriptor] = list(descriptors or [])

    def append(self, descriptor: ErrorDescriptor) -> None:
        if self._descriptors and descriptor.iteration < self._descriptors[-1].iteration:
            raise InvariantViolation("memory descriptors must be ordered by iteration")
        self._descriptors.append(descriptor)

    def __len__(self) -> int:
        return len(self._descriptors)

    def __iter__(self) -> Iterator[ErrorDescriptor]:
        return iter(self._descriptors)

    def snapshot(self) -> tuple[ErrorDescriptor, ...]:
        return tuple(self._descriptors)


class ProgramStore:
    """Append-only (program, output) pairs whose outputs ran clean.

    The entry with the highest index is the designated working program.
    """

    def __init__(self) -> None:
        self._entries: list[tuple[Program, ExecutionOutput]] = []

    def append(self, program: Program, output: ExecutionOutput) -> None:
        if not output.ok:
            raise InvariantViolation("only clean executions may enter the store")
        if self._entries and program.index <= self._entries[-1][0].index:
            raise InvariantViolation("store entries must have increasing indices")
        self._entries.append((program, output))

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[tuple[Program, ExecutionOutput]]:
        return iter(self._entries)

    @property
    def best(self) -> Optional[tuple[Program, ExecutionOutput]]:
        """The most recently stored working program and its output."""
        return self._entries[-1] if self._entries else None


@dataclass(frozen=True)
class TokenUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be non-negative")

    @property
    def total(self) -> int:
        return self.prompt_tokens + self.completion_tokens


@dataclass
class Budget:
    """Refinement budgets plus the monotone counters spent against them."""

    max_validations: int = 2
    max_corrections_per_validation: int = 2
    token_budget: Optional[int] = None
    validations_used: int = 0
    corrections_used_current_phase: int = 0
    tokens_used: int = 0

    def can_validate(self) -> bool:
        return self.validations_used < self.max_validations

    def can_correct(self) -> bool:
        return self.corrections_used_current_phase < self.max_corrections_per_validation

    def spend_validation(self) -> None:
        if not self.can_validate():
            raise InvariantViolation("validation budget exceeded")
        self.validations_used += 1
        # Each validation opens a fresh correction phase.
        self.corrections_used_current_phase = 0

    def spend_correction(self) -> None:
        if not self.can_correct():
            raise InvariantViolation("correction budget exceeded")
        self.corrections_used_current_phase += 1

    def add_tokens(self, usage: TokenUsage) -> None:
        self.tokens_used += usage.total

    def tokens_exhausted(self) -> bool:
        return self.token_budget is not None and self.tokens_used >= self.token_budget

    def fresh(self) -> "Budget":
        """A zero-counter copy carrying the same limits."""
        return Budget(
            max_validations=self.max_validations,
            max_corrections_per_validation=self.max_corrections_per_validation,
            token_budget=self.token_budget,
        )


@dataclass(frozen=True)
class CotTrace:
    text: str
    provisional_answer: Optional[str] = None


@dataclass(frozen=True)
class Verdict:
    correct: bool
    method: VerifyMethod
    detail: str = ""


@dataclass(frozen=True)
class IterationEvent:
    program: Program
    output: ExecutionOutput
    route: Route
    action: Action
    descriptor: Optional[ErrorDescriptor] = None


@dataclass(frozen=True)
class TraceRecord:
    problem: Problem
    propositions: Optional[PropositionSet]
    events: tuple[IterationEvent, ...]
    cot: Optional[CotTrace]
    integration_prompt: Optional[str]
    final_text: str
    final_answer: str
    token_usage: TokenUsage
    config_fingerprint: str
    verdict: Optional[Verdict] = None
    halt_reason: Optional[HaltReason] = None
    failure: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.final_answer:
            raise ValueError("final_answer must be non-empty for a completed run")
        indices = [event.program.index for event in self.events]
        if indices != sorted(indices):
            raise ValueError("events must be ordered by iteration index")
