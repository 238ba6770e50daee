"""Line-delimited trace-corpus serialization.

One record per physical line, stable field order, JSON-escaped so multi-line
program sources stay on one line. The schema is documented in
docs/trace-schema.md and versioned through the leading "schema_version" field.
"""

from __future__ import annotations

import hashlib
import json
import logging
from typing import BinaryIO, Iterator, Optional

from .core import (
    TRACE_SCHEMA_VERSION,
    Action,
    Classification,
    CotTrace,
    ErrorDescriptor,
    ErrorKind,
    ExecutionOutput,
    HaltReason,
    IterationEvent,
    LintReport,
    Origin,
    Problem,
    Program,
    PropositionSet,
    Route,
    Source,
    TokenUsage,
    TraceRecord,
    Verdict,
    VerifyMethod,
)
from .errors import TraceParseError

logger = logging.getLogger(__name__)

_RECORD_FIELDS = (
    "schema_version",
    "problem",
    "propositions",
    "events",
    "cot",
    "integration_prompt",
    "final_text",
    "final_answer",
    "verdict",
    "token_usage",
    "config_fingerprint",
    "halt_reason",
    "failure",
)

# Fields stripped before hashing so corpora from live executions still compare.
_TIMING_FIELDS = ("wall_time",)


def _problem_dict(problem: Problem) -> dict:
    return {
        "id": problem.id,
        "statement": problem.statement,
        "gold_answer": problem.gold_answer,
        "subject": problem.subject,
        "level": problem.level,
        "source": problem.source.value,
    }


def _lint_dict(lint: LintReport) -> dict:
    return {
        "disallowed_imports": list(lint.disallowed_imports),
        "comprehension_count": lint.comprehension_count,
        "recursion_flags": list(lint.recursion_flags),
        "has_verification_marker": lint.has_verification_marker,
        "print_count": lint.print_count,
        "parse_failed": lint.parse_failed,
    }


def _program_dict(program: Program) -> dict:
    return {
        "index": program.index,
        "source": program.source,
        "lint": _lint_dict(program.lint),
        "origin": program.origin.value,
    }


def _output_dict(output: ExecutionOutput) -> dict:
    return {
        "stdout": output.stdout,
        "stderr": output.stderr,
        "exit_status": output.exit_status,
        "wall_time": output.wall_time,
        "timed_out": output.timed_out,
        "classification": output.classification.value,
    }


def _descriptor_dict(descriptor: ErrorDescriptor) -> dict:
    return {
        "iteration": descriptor.iteration,
        "kind": descriptor.kind.value,
        "text": descriptor.text,
    }


def _event_dict(event: IterationEvent) -> dict:
    return {
        "program": _program_dict(event.program),
        "output": _output_dict(event.output),
        "route": event.route.value,
        "action": event.action.value,
        "descriptor": _descriptor_dict(event.descriptor) if event.descriptor else None,
    }


def record_to_dict(record: TraceRecord) -> dict:
    return {
        "schema_version": TRACE_SCHEMA_VERSION,
        "problem": _problem_dict(record.problem),
        "propositions": list(record.propositions.items) if record.propositions else None,
        "events": [_event_dict(event) for event in record.events],
        "cot": (
            {"text": record.cot.text, "provisional_answer": record.cot.provisional_answer}
            if record.cot
            else None
        ),
        "integration_prompt": record.integration_prompt,
        "final_text": record.final_text,
        "final_answer": record.final_answer,
        "verdict": (
            {
                "correct": record.verdict.correct,
                "method": record.verdict.method.value,
                "detail": record.verdict.detail,
            }
            if record.verdict
            else None
        ),
        "token_usage": {
            "prompt_tokens": record.token_usage.prompt_tokens,
            "completion_tokens": record.token_usage.completion_tokens,
        },
        "config_fingerprint": record.config_fingerprint,
        "halt_reason": record.halt_reason.value if record.halt_reason else None,
        "failure": record.failure,
    }


def trace_line(record: TraceRecord) -> bytes:
    """One self-contained UTF-8 line, identical bytes for identical records."""
    payload = record_to_dict(record)
    text = json.dumps(payload, ensure_ascii=False, separators=(",", ":"))
    return text.encode("utf-8") + b"\n"


def write_trace(record: TraceRecord, sink: BinaryIO) -> None:
    """Append one record to ``sink``.

    The line is fully built before any byte is written, so an I/O failure
    never commits a partial record.
    """
    line = trace_line(record)
    sink.write(line)
    sink.flush()


def _require(payload: dict, name: str):
    if name not in payload or payload[name] is None:
        raise TraceParseError(f"{name} missing")
    return payload[name]


def _parse_enum(enum_cls, raw, fieldname: str):
    try:
        return enum_cls(raw)
    except ValueError as exc:
        raise TraceParseError(f"{fieldname} has unknown value {raw!r}") from exc


def _parse_problem(payload: dict) -> Problem:
    return Problem(
        id=_require(payload, "id"),
        statement=_require(payload, "statement"),
        gold_answer=payload.get("gold_answer"),
        subject=payload.get("subject"),
        level=payload.get("level"),
        source=_parse_enum(Source, payload.get("source", "Custom"), "problem.source"),
    )


def _parse_lint(payload: dict) -> LintReport:
    return LintReport(
        disallowed_imports=tuple(payload.get("disallowed_imports", ())),
        comprehension_count=payload.get("comprehension_count", 0),
        recursion_flags=tuple(payload.get("recursion_flags", ())),
        has_verification_marker=payload.get("has_verification_marker", False),
        print_count=payload.get("print_count", 0),
        parse_failed=payload.get("parse_failed", False),
    )


def _parse_program(payload: dict) -> Program:
    return Program(
        index=_require(payload, "index"),
        source=_require(payload, "source"),
        lint=_parse_lint(payload.get("lint", {})),
        origin=_parse_enum(Origin, payload.get("origin", "initial"), "program.origin"),
    )


def _parse_output(payload: dict) -> ExecutionOutput:
    return ExecutionOutput(
        stdout=payload.get("stdout", ""),
        stderr=payload.get("stderr", ""),
        exit_status=_require(payload, "exit_status"),
        wall_time=payload.get("wall_time", 0.0),
        timed_out=payload.get("timed_out", False),
    )


def _parse_descriptor(payload: Optional[dict]) -> Optional[ErrorDescriptor]:
    if payload is None:
        return None
    return ErrorDescriptor(
        iteration=_require(payload, "iteration"),
        kind=_parse_enum(ErrorKind, _require(payload, "kind"), "descriptor.kind"),
        text=_require(payload, "text"),
    )


def _parse_event(payload: dict) -> IterationEvent:
    return IterationEvent(
        program=_parse_program(_require(payload, "program")),
        output=_parse_output(_require(payload, "output")),
        route=_parse_enum(Route, _require(payload, "route"), "event.route"),
        action=_parse_enum(Action, _require(payload, "action"), "event.action"),
        descriptor=_parse_descriptor(payload.get("descriptor")),
    )


def read_trace(line: str | bytes) -> TraceRecord:
    """Parse one corpus line back into a TraceRecord.

    Unknown fields are ignored with a warning so newer corpora stay readable.
    Missing required fields raise TraceParseError naming the field.
    """
    if isinstance(line, bytes):
        line = line.decode("utf-8")
    try:
        payload = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TraceParseError(f"unparseable trace line: {exc}") from exc
    if not isinstance(payload, dict):
        raise TraceParseError("trace line is not an object")

    unknown = sorted(set(payload) - set(_RECORD_FIELDS))
    if unknown:
        logger.warning("ignoring unknown trace fields: %s", ", ".join(unknown))

    version = payload.get("schema_version")
    if version != TRACE_SCHEMA_VERSION:
        logger.warning("trace schema_version %r differs from %d", version, TRACE_SCHEMA_VERSION)

    for name in ("problem", "final_answer", "token_usage", "config_fingerprint"):
        _require(payload, name)
    usage_payload = payload["token_usage"]
    cot_payload = payload.get("cot")
    verdict_payload = payload.get("verdict")
    halt = payload.get("halt_reason")

    return TraceRecord(
        problem=_parse_problem(_require(payload, "problem")),
        propositions=(
            PropositionSet(tuple(payload["propositions"]))
            if payload.get("propositions")
            else None
        ),
        events=tuple(_parse_event(event) for event in payload.get("events", ())),
        cot=(
            CotTrace(
                text=_require(cot_payload, "text"),
                provisional_answer=cot_payload.get("provisional_answer"),
            )
            if cot_payload
            else None
        ),
        integration_prompt=payload.get("integration_prompt"),
        final_text=_require(payload, "final_text") if "final_text" in payload else "",
        final_answer=_require(payload, "final_answer"),
        token_usage=TokenUsage(
            prompt_tokens=usage_payload.get("prompt_tokens", 0),
            completion_tokens=usage_payload.get("completion_tokens", 0),
        ),
        config_fingerprint=_require(payload, "config_fingerprint"),
        verdict=(
            Verdict(
                correct=_require(verdict_payload, "correct"),
                method=_parse_enum(
                    VerifyMethod, _require(verdict_payload, "method"), "verdict.method"
                ),
                detail=verdict_payload.get("detail", ""),
            )
            if verdict_payload
            else None
        ),
        halt_reason=_parse_enum(HaltReason, halt, "halt_reason") if halt else None,
        failure=payload.get("failure"),
    )


def read_corpus(stream) -> Iterator[TraceRecord]:
    for line in stream:
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        if line.strip():
            yield read_trace(line)


def _strip_timing(node):
    if isinstance(node, dict):
        return {k: _strip_timing(v) for k, v in node.items() if k not in _TIMING_FIELDS}
    if isinstance(node, list):
        return [_strip_timing(item) for item in node]
    return node


def canonical_line(line: str | bytes) -> str:
    """A line re-serialized with timing fields dropped, for comparison."""
    if isinstance(line, bytes):
        line = line.decode("utf-8")
    payload = _strip_timing(json.loads(line))
    return json.dumps(payload, ensure_ascii=False, separators=(",", ":"), sort_keys=True)


def corpus_digest(lines) -> str:
    """Order-sensitive digest of a corpus with timing fields excluded."""
    hasher = hashlib.sha256()
    for line in lines:
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        if not line.strip():
            continue
        hasher.update(canonical_line(line).encode("utf-8"))
        hasher.update(b"\n")
    return hasher.hexdigest()
