"""The execution-guided refinement state machine.

One problem flows through: proposition extraction, program generation,
execution, then a routed loop of process validations (clean runs) and error
corrections (failed runs) under explicit budgets, with every mistake
descriptor appended to an append-only reflection memory and every clean
program kept in the program store. A separate token-reasoning pass never sees
program context; the two branches meet only in the final integration prompt.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

from .core import (
    Action,
    Budget,
    CotTrace,
    ErrorDescriptor,
    ErrorKind,
    ExecutionOutput,
    HaltReason,
    IterationEvent,
    Origin,
    Problem,
    Program,
    PropositionSet,
    Route,
    TokenUsage,
    TraceRecord,
)
from .errors import BackendError, EngineError, InvariantViolation, ResponseFormatError
from .executor import DEFAULT_ALLOWLIST, ExecLimits, ExecutionBackend, execute, lint
from .llm import (
    Backend,
    ChatRequest,
    Message,
    Role,
    Tag,
    UsageMeter,
    accumulate,
    assistant,
    complete,
    user,
)
from .prompts import (
    TemplateCatalog,
    default_catalog,
    extract_boxed,
    extract_code,
    parse_propositions,
    parse_validation,
    render,
)

logger = logging.getLogger(__name__)

NO_PROGRAM_TEXT = "no working program was produced"
NO_ANSWER_TEXT = "[no-answer]"
ENGINE_FAILURE_TEXT = "[engine-failure]"

_REASK_INSTRUCTION = (
    "Your previous reply did not contain a usable program. "
    "Emit a single fenced code block with the complete program and nothing else."
)


class Variant(str, Enum):
    COT = "cot"
    POT_NC = "pot-nc"
    POT = "pot"
    IIPC_NS_NMS = "iipc-ns-nms"
    IIPC_NS = "iipc-ns"
    IIPC = "iipc"

    @property
    def runs_loop(self) -> bool:
        return self is not Variant.COT

    @property
    def pot_like(self) -> bool:
        """No validation route at all: the first clean output halts."""
        return self in (Variant.POT, Variant.POT_NC)

    @property
    def consults_memory(self) -> bool:
        return self in (Variant.IIPC_NS, Variant.IIPC)

    @property
    def has_cot_branch(self) -> bool:
        return self in (Variant.COT, Variant.IIPC)

    @property
    def cot_fallback(self) -> bool:
        return self in (Variant.POT, Variant.POT_NC)

    @property
    def combine_mode(self) -> Optional[str]:
        if self is Variant.IIPC:
            return "full"
        if self in (Variant.IIPC_NS, Variant.IIPC_NS_NMS):
            return "program-only"
        return None


@dataclass(frozen=True)
class RunConfig:
    variant: Variant = Variant.IIPC
    model: str = "offline"
    temperature: float = 0.1
    budget: Budget = field(default_factory=Budget)
    exec_limits: ExecLimits = field(default_factory=ExecLimits)
    pot_retry_limit: int = 4
    seed: Optional[int] = None
    allowlist: frozenset[str] = DEFAULT_ALLOWLIST
    max_tokens: Optional[int] = None

    def fingerprint(self) -> str:
        payload = {
            "variant": self.variant.value,
            "model": self.model,
            "temperature": self.temperature,
            "max_validations": self.budget.max_validations,
            "max_corrections_per_validation": self.budget.max_corrections_per_validation,
            "token_budget": self.budget.token_budget,
            "timeout": self.exec_limits.timeout,
            "max_output_bytes": self.exec_limits.max_output_bytes,
            "pot_retry_limit": self.pot_retry_limit,
            "seed": self.seed,
            "allowlist": sorted(self.allowlist),
            "max_tokens": self.max_tokens,
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return "sha256:" + hashlib.sha256(blob.encode("utf-8")).hexdigest()[:32]


@dataclass
class ReasoningState:
    problem: Problem
    budget: Budget
    propositions: Optional[PropositionSet] = None
    memory: "ReflectionMemory" = None  # type: ignore[assignment]
    store: "ProgramStore" = None  # type: ignore[assignment]
    current: Optional[tuple[Program, ExecutionOutput]] = None
    phase: int = 0
    halted: bool = False
    halt_reason: Optional[HaltReason] = None
    events: list[IterationEvent] = field(default_factory=list)
    token_usage: TokenUsage = field(default_factory=TokenUsage)
    last_index: int = 0
    prog_reasked: bool = False

    def __post_init__(self) -> None:
        from .core import ProgramStore, ReflectionMemory

        if self.memory is None:
            self.memory = ReflectionMemory()
        if self.store is None:
            self.store = ProgramStore()

    def halt(self, reason: HaltReason) -> None:
        if self.halted:
            raise InvariantViolation("state already halted")
        self.halted = True
        self.halt_reason = reason


class _TokenBudgetReached(Exception):
    """Internal control flow: a model call was blocked by the token budget."""


def _line_similarity(before: str, after: str) -> float:
    import difflib

    return difflib.SequenceMatcher(
        a=before.splitlines(), b=after.splitlines(), autojunk=False
    ).ratio()


class Engine:
    """Drives one problem at a time; share backends across engines freely."""

    def __init__(
        self,
        backend: Backend,
        exec_backend: ExecutionBackend,
        config: RunConfig,
        catalog: Optional[TemplateCatalog] = None,
        meter: Optional[UsageMeter] = None,
    ):
        self.backend = backend
        self.exec_backend = exec_backend
        self.config = config
        self.catalog = catalog or default_catalog()
        self.meter = meter

    # -- model access -------------------------------------------------------

    def _chat(
        self,
        state: ReasoningState,
        tag: Tag,
        messages: Sequence[Message],
        temperature: Optional[float] = None,
    ) -> str:
        if state.budget.tokens_exhausted():
            raise _TokenBudgetReached()
        request = ChatRequest(
            messages=tuple(messages),
            model=self.config.model,
            tag=tag,
            temperature=self.config.temperature if temperature is None else temperature,
            max_tokens=self.config.max_tokens,
        )
        response = complete(self.backend, request, self.meter)
        state.token_usage = accumulate(state.token_usage, response.usage)
        state.budget.add_tokens(response.usage)
        return response.content

    def _memory_context(self, state: ReasoningState):
        if self.config.variant.consults_memory:
            return state.memory.snapshot()
        return ()

    @staticmethod
    def _describe_output(output: ExecutionOutput) -> str:
        parts = []
        if output.stdout.strip():
            parts.append(output.stdout.rstrip())
        if output.stderr.strip():
            parts.append("stderr:\n" + output.stderr.rstrip())
        if output.timed_out:
            parts.append("(process killed: timeout)")
        parts.append(f"exit status: {output.exit_status}")
        return "\n".join(parts)

    # -- component functions -------------------------------------------------

    def derive_propositions(self, problem: Problem, state: ReasoningState) -> PropositionSet:
        prompt = render("init", self.catalog, problem=problem.statement)
        text = self._chat(state, Tag.INIT, [user(prompt)])
        return parse_propositions(text)

    def generate_program(self, state: ReasoningState) -> Optional[Program]:
        prompt = render(
            "prog",
            self.catalog,
            problem=state.problem.statement,
            propositions=state.propositions,
        )
        text = self._chat(state, Tag.PROG, [user(prompt)])
        source = extract_code(text)
        if source is None or not source.strip():
            state.prog_reasked = True
            text = self._chat(
                state,
                Tag.PROG,
                [user(prompt), assistant(text), user(_REASK_INSTRUCTION)],
            )
            source = extract_code(text)
        if source is None or not source.strip():
            state.memory.append(
                ErrorDescriptor(
                    iteration=0,
                    kind=ErrorKind.FORMAT_FAILURE,
                    text="no fenced code block in either program-generation response",
                )
            )
            return None
        state.last_index += 1
        return Program(
            index=state.last_index,
            source=source,
            lint=lint(source, self.config.allowlist),
            origin=Origin.INITIAL,
        )

    def _execute(self, state: ReasoningState, program: Program) -> ExecutionOutput:
        output = execute(program.source, self.config.exec_limits, self.exec_backend, program.lint)
        state.current = (program, output)
        if output.ok:
            state.store.append(program, output)
        return output

    def _revise(self, state: ReasoningState, source: str, origin: Origin) -> None:
        state.last_index += 1
        program = Program(
            index=state.last_index,
            source=source,
            lint=lint(source, self.config.allowlist),
            origin=origin,
        )
        self._execute(state, program)

    # -- the state machine ---------------------------------------------------

    def _effective_budget(self) -> Budget:
        variant = self.config.variant
        if variant is Variant.POT:
            return Budget(
                max_validations=0,
                max_corrections_per_validation=self.config.pot_retry_limit,
                token_budget=self.config.budget.token_budget,
            )
        if variant is Variant.POT_NC:
            return Budget(
                max_validations=0,
                max_corrections_per_validation=0,
                token_budget=self.config.budget.token_budget,
            )
        return self.config.budget.fresh()

    def begin(self, problem: Problem) -> ReasoningState:
        """Propositions, initial program, first execution; may halt early."""
        state = ReasoningState(problem=problem, budget=self._effective_budget())
        self._begin_into(state)
        return state

    def _begin_into(self, state: ReasoningState) -> None:
        try:
            state.propositions = self.derive_propositions(state.problem, state)
            program = self.generate_program(state)
        except _TokenBudgetReached:
            state.halt(HaltReason.TOKEN_BUDGET)
            return
        if program is None:
            state.halt(HaltReason.NO_PROGRAM)
            return
        self._execute(state, program)

    def step(self, state: ReasoningState) -> ReasoningState:
        """One routed refinement move; exactly one of the two routes runs."""
        if state.halted:
            raise InvariantViolation("step on a halted state")
        if state.current is None:
            raise InvariantViolation("step needs a current (program, output) pair")
        program, output = state.current
        try:
            if output.ok:
                self._step_validate(state, program, output)
            else:
                self._step_correct(state, program, output)
        except _TokenBudgetReached:
            route = Route.VALIDATE if output.ok else Route.CORRECT
            state.events.append(IterationEvent(program, output, route, Action.BUDGET_EXHAUSTED))
            state.halt(HaltReason.TOKEN_BUDGET)
        return state

    def _step_validate(self, state: ReasoningState, program: Program, output: ExecutionOutput) -> None:
        if self.config.variant.pot_like:
            # Program-of-thoughts accepts the first clean output outright.
            state.events.append(IterationEvent(program, output, Route.VALIDATE, Action.STOPPED))
            state.halt(HaltReason.STOP_SIGNAL)
            return
        if not state.budget.can_validate():
            state.events.append(
                IterationEvent(program, output, Route.VALIDATE, Action.BUDGET_EXHAUSTED)
            )
            state.halt(HaltReason.VALIDATION_BUDGET)
            return
        prompt = render(
            "val",
            self.catalog,
            problem=state.problem.statement,
            propositions=state.propositions,
            program=program.source,
            output=self._describe_output(output),
            memory=self._memory_context(state),
        )
        text = self._chat(state, Tag.VAL, [user(prompt)])
        state.budget.spend_validation()
        state.phase += 1
        try:
            outcome = parse_validation(text)
        except ResponseFormatError:
            self._book_format_failure(state, program, output, Route.VALIDATE)
            return
        if outcome.stop:
            state.events.append(IterationEvent(program, output, Route.VALIDATE, Action.STOPPED))
            state.halt(HaltReason.STOP_SIGNAL)
            return
        descriptor = ErrorDescriptor(
            iteration=program.index, kind=ErrorKind.LOGIC_FLAW, text=outcome.reflection
        )
        state.memory.append(descriptor)
        self._revise(state, outcome.source, Origin.VALIDATION)
        state.events.append(
            IterationEvent(program, output, Route.VALIDATE, Action.REVISED, descriptor)
        )

    @staticmethod
    def _error_kind(output: ExecutionOutput) -> ErrorKind:
        if output.timed_out:
            return ErrorKind.TIMEOUT
        if output.stderr.startswith("disallowed import:"):
            return ErrorKind.DISALLOWED_IMPORT
        return ErrorKind.RUNTIME

    def _step_correct(self, state: ReasoningState, program: Program, output: ExecutionOutput) -> None:
        if not state.budget.can_correct():
            state.events.append(
                IterationEvent(program, output, Route.CORRECT, Action.BUDGET_EXHAUSTED)
            )
            state.halt(HaltReason.CORRECTION_BUDGET)
            return
        prompt = render(
            "err",
            self.catalog,
            problem=state.problem.statement,
            propositions=state.propositions,
            program=program.source,
            output=self._describe_output(output),
            memory=self._memory_context(state),
        )
        text = self._chat(state, Tag.ERR, [user(prompt)])
        state.budget.spend_correction()
        try:
            outcome = parse_validation(text)
        except ResponseFormatError:
            self._book_format_failure(state, program, output, Route.CORRECT)
            return
        if outcome.stop:
            # A stop signal is not a valid answer to a failed execution.
            self._book_format_failure(state, program, output, Route.CORRECT)
            return
        descriptor = ErrorDescriptor(
            iteration=program.index, kind=self._error_kind(output), text=outcome.reflection
        )
        state.memory.append(descriptor)
        # Amend-only is a prompt contract; the diff size is logged so drift
        # from it stays observable.
        logger.info(
            "correction %d->%d changed %.0f%% of lines",
            program.index,
            program.index + 1,
            100.0 * (1.0 - _line_similarity(program.source, outcome.source)),
        )
        self._revise(state, outcome.source, Origin.CORRECTION)
        state.events.append(
            IterationEvent(program, output, Route.CORRECT, Action.REVISED, descriptor)
        )

    def _book_format_failure(
        self, state: ReasoningState, program: Program, output: ExecutionOutput, route: Route
    ) -> None:
        descriptor = ErrorDescriptor(
            iteration=program.index,
            kind=ErrorKind.FORMAT_FAILURE,
            text="response carried neither a stop signal nor a fenced code block",
        )
        state.memory.append(descriptor)
        state.events.append(IterationEvent(program, output, route, Action.REVISED, descriptor))

    def loop(self, problem: Problem) -> tuple[ReasoningState, list[IterationEvent]]:
        if not self.config.variant.runs_loop:
            raise InvariantViolation(f"variant {self.config.variant.value} does not run the loop")
        state = self.begin(problem)
        while not state.halted:
            self.step(state)
        return state, state.events

    # -- branches and integration --------------------------------------------

    def run_cot(self, problem: Problem, propositions: PropositionSet, state: ReasoningState) -> CotTrace:
        """Token-reasoning pass built from the problem and propositions only."""
        prompt = render("cot", self.catalog, problem=problem.statement, propositions=propositions)
        text = self._chat(state, Tag.COT, [user(prompt)])
        answer = extract_boxed(text)
        return CotTrace(text=text, provisional_answer=answer or None)

    def combine(self, state: ReasoningState, cot: Optional[CotTrace]) -> tuple[str, str]:
        """Integration prompt and its response; returns (prompt, final_text)."""
        best = state.store.best
        program_text = best[0].source if best else NO_PROGRAM_TEXT
        output_text = best[1].stdout if best else NO_PROGRAM_TEXT
        if self.config.variant.combine_mode == "full":
            if cot is None:
                raise InvariantViolation("full integration requires the token-reasoning trace")
            prompt = render(
                "comb",
                self.catalog,
                problem=state.problem.statement,
                propositions=state.propositions or ("(none)",),
                program=program_text,
                program_output=output_text,
                cot=cot.text,
            )
        else:
            prompt = render(
                "comb_program_only",
                self.catalog,
                problem=state.problem.statement,
                propositions=state.propositions or ("(none)",),
                program=program_text,
                program_output=output_text,
            )
        text = self._chat(state, Tag.COMB, [user(prompt)])
        return prompt, text

    # -- the full per-problem pipeline ----------------------------------------

    def run_full(self, problem: Problem) -> TraceRecord:
        variant = self.config.variant
        state = ReasoningState(problem=problem, budget=self._effective_budget())
        cot: Optional[CotTrace] = None
        integration_prompt: Optional[str] = None
        final_text = ""
        final_answer = ""
        failure: Optional[str] = None

        try:
            if variant.runs_loop:
                self._begin_into(state)
                while not state.halted:
                    self.step(state)
            else:
                state.propositions = self.derive_propositions(problem, state)

            if variant.has_cot_branch or (variant.cot_fallback and state.store.best is None):
                if state.propositions is not None:
                    try:
                        cot = self.run_cot(problem, state.propositions, state)
                    except _TokenBudgetReached:
                        self._mark_token_halt(state)

            wants_combine = variant.combine_mode == "program-only" or (
                variant.combine_mode == "full" and cot is not None
            )
            if wants_combine:
                try:
                    integration_prompt, final_text = self.combine(state, cot)
                    final_answer = extract_boxed(final_text)
                except _TokenBudgetReached:
                    self._mark_token_halt(state)

            if not final_text:
                if variant.combine_mode is None and variant is not Variant.COT and state.store.best:
                    # Program-of-thoughts answers straight from the clean output.
                    final_text = state.store.best[1].stdout
                    final_answer = extract_boxed(final_text)
                elif cot is not None:
                    final_text = cot.text
                    final_answer = cot.provisional_answer or extract_boxed(cot.text)
        except _TokenBudgetReached:
            self._mark_token_halt(state)
        except (BackendError, EngineError) as exc:
            logger.warning("engine failure on problem %s: %s", problem.id, exc)
            failure = str(exc)
            final_answer = ENGINE_FAILURE_TEXT

        if not final_answer:
            if cot is not None and cot.provisional_answer:
                final_answer = cot.provisional_answer
            elif state.store.best is not None:
                final_answer = extract_boxed(state.store.best[1].stdout) or NO_ANSWER_TEXT
            else:
                final_answer = NO_ANSWER_TEXT

        return TraceRecord(
            problem=problem,
            propositions=state.propositions,
            events=tuple(state.events),
            cot=cot,
            integration_prompt=integration_prompt,
            final_text=final_text,
            final_answer=final_answer,
            token_usage=state.token_usage,
            config_fingerprint=self.config.fingerprint(),
            halt_reason=state.halt_reason,
            failure=failure,
        )

    @staticmethod
    def _mark_token_halt(state: ReasoningState) -> None:
        if not state.halted:
            state.halt(HaltReason.TOKEN_BUDGET)


def run_full(
    problem: Problem,
    config: RunConfig,
    backend: Backend,
    exec_backend: ExecutionBackend,
    catalog: Optional[TemplateCatalog] = None,
    meter: Optional[UsageMeter] = None,
) -> TraceRecord:
    return Engine(backend, exec_backend, config, catalog, meter).run_full(problem)


def max_loop_calls(budget: Budget) -> int:
    """Upper bound on loop-side model calls: one proposition call, one program
    call, one validation plus its corrections per validation phase, and the
    pre-validation correction allowance. The single documented re-ask for a
    codeless program response is on top of this bound."""
    per_validation = 1 + budget.max_corrections_per_validation
    return 1 + 1 + budget.max_validations * per_validation + budget.max_corrections_per_validation


# ---------------------------------------------------------------------------
# Instrumentation: revisit regret and branch independence

Matcher = Callable[[Program, ErrorDescriptor], bool]


def _mentions(text: str, name: str) -> bool:
    return re.search(rf"\b{re.escape(name)}\b", text) is not None


def default_matcher(program: Program, descriptor: ErrorDescriptor) -> bool:
    """Kind-aligned repeat detection over lint-visible constructs."""
    if descriptor.kind is ErrorKind.DISALLOWED_IMPORT:
        return any(_mentions(descriptor.text, name) for name in program.lint.disallowed_imports)
    if descriptor.kind in (ErrorKind.RUNTIME, ErrorKind.LOGIC_FLAW, ErrorKind.TIMEOUT):
        return any(_mentions(descriptor.text, name) for name in program.lint.recursion_flags)
    return False


def revisit_indicators(record: TraceRecord, matcher: Optional[Matcher] = None) -> list[int]:
    """Per-iteration flags: does this program repeat a remembered mistake."""
    matcher = matcher or default_matcher
    seen: list[ErrorDescriptor] = []
    flags: list[int] = []
    for event in record.events:
        flags.append(1 if any(matcher(event.program, d) for d in seen) else 0)
        if event.descriptor is not None:
            seen.append(event.descriptor)
    return flags


def revisit_regret(record: TraceRecord, matcher: Optional[Matcher] = None) -> int:
    return sum(revisit_indicators(record, matcher))


def independence_violations(
    records: Sequence[TraceRecord],
    cot_texts: Sequence[str],
    min_len: int = 20,
) -> list[str]:
    """Program/stdout fragments of length >= min_len found in token-branch
    request text; empty means the branches stayed independent."""
    artifacts: list[str] = []
    for record in records:
        for event in record.events:
            artifacts.append(event.program.source)
            if event.output.stdout:
                artifacts.append(event.output.stdout)
    violations = []
    for artifact in artifacts:
        if len(artifact) < min_len:
            continue
        for start in range(len(artifact) - min_len + 1):
            window = artifact[start : start + min_len]
            if any(window in text for text in cot_texts):
                violations.append(window)
                break
    return violations
