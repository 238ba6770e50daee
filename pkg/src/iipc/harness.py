"""Dataset loading, balanced sampling, batch evaluation, and voting.

Evaluation runs problems through the engine with bounded parallelism; one
problem failing never poisons the batch. Trace lines are flushed in dataset
order so a corpus is byte-reproducible regardless of the worker count.
"""

from __future__ import annotations

import csv
import json
import logging
import random
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import BinaryIO, Optional, Sequence, Union

from .core import (
    MATH_SUBJECTS,
    HaltReason,
    Problem,
    Source,
    TokenUsage,
    TraceRecord,
    Verdict,
    VerifyMethod,
)
from .errors import IipcError
from .executor import ExecutionBackend
from .judge import CanonicalAnswer, JudgePolicy, JudgeStats, Outcome, equal, judge, normalize
from .llm import Backend, UsageMeter
from .prompts import TemplateCatalog, extract_boxed
from .refine import Engine, RunConfig, run_full
from .trace import write_trace

logger = logging.getLogger(__name__)


@dataclass
class Dataset:
    name: str
    problems: list[Problem]
    answer_policy: JudgePolicy = field(default_factory=JudgePolicy)

    def __post_init__(self) -> None:
        ids = [p.id for p in self.problems]
        if len(ids) != len(set(ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate problem ids: {', '.join(dupes[:5])}")

    def __len__(self) -> int:
        return len(self.problems)


@dataclass
class SampledDataset(Dataset):
    manifest: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Loaders

_SUBJECT_ALIASES = {
    "algebra": "Algebra",
    "counting & probability": "Counting & Probability",
    "counting and probability": "Counting & Probability",
    "counting_and_probability": "Counting & Probability",
    "geometry": "Geometry",
    "intermediate algebra": "Intermediate Algebra",
    "intermediate_algebra": "Intermediate Algebra",
    "number theory": "Number Theory",
    "number_theory": "Number Theory",
    "prealgebra": "Prealgebra",
    "precalculus": "Precalculus",
}


def _canonical_subject(raw: str) -> Optional[str]:
    return _SUBJECT_ALIASES.get(raw.strip().lower())


def load_math(root: Union[str, Path]) -> Dataset:
    """Per-problem JSON files with problem / level ("Level N") / type / solution.

    The gold answer is the boxed expression of the reference solution. Files
    missing or garbling a required field are skipped with a warning.
    """
    root = Path(root)
    problems = []
    skipped = 0
    for path in sorted(root.rglob("*.json")):
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
            statement = payload["problem"]
            level_raw = payload["level"]
            subject_raw = payload["type"]
            solution = payload["solution"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            logger.warning("skipping %s: %s", path, exc)
            skipped += 1
            continue
        level_text = str(level_raw).replace("Level", "").strip()
        subject = _canonical_subject(str(subject_raw))
        gold = extract_boxed(str(solution))
        if not level_text.isdigit() or subject is None or not gold or not str(statement).strip():
            logger.warning("skipping %s: unusable field values", path)
            skipped += 1
            continue
        problems.append(
            Problem(
                id=str(path.relative_to(root).with_suffix("")),
                statement=str(statement),
                gold_answer=gold,
                subject=subject,
                level=int(level_text),
                source=Source.MATH,
            )
        )
    if skipped:
        logger.warning("math loader skipped %d files", skipped)
    return Dataset(name="math", problems=problems, answer_policy=JudgePolicy())


def _find_column(fieldnames: Sequence[str], *needles: str) -> Optional[str]:
    for needle in needles:
        for name in fieldnames:
            if needle in name.strip().lower():
                return name
    return None


def load_aime(file: Union[str, Path]) -> Dataset:
    """CSV rows of (year, problem number, statement, integer answer).

    Ids are "YYYY-N"; answers must be integers in [0, 999], stored with
    leading zeros stripped. Non-integer rows are skipped with a warning.
    """
    path = Path(file)
    problems = []
    seen_ids: Counter[str] = Counter()
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        fields = reader.fieldnames or []
        year_col = _find_column(fields, "year")
        number_col = _find_column(fields, "problem number", "problem_number", "number")
        text_col = _find_column(fields, "question", "statement", "problem")
        answer_col = _find_column(fields, "answer")
        if not all((year_col, number_col, text_col, answer_col)):
            raise IipcError(f"{path}: could not locate year/number/statement/answer columns")
        for row in reader:
            raw_answer = (row[answer_col] or "").strip()
            try:
                answer = int(raw_answer.lstrip("0") or "0") if raw_answer.isdigit() else int(raw_answer)
            except ValueError:
                logger.warning("skipping %s-%s: non-integer answer %r", row.get(year_col), row.get(number_col), raw_answer)
                continue
            if not 0 <= answer <= 999:
                logger.warning("skipping %s-%s: answer %d outside [0, 999]", row.get(year_col), row.get(number_col), answer)
                continue
            base_id = f"{str(row[year_col]).strip()}-{str(row[number_col]).strip()}"
            seen_ids[base_id] += 1
            problem_id = base_id if seen_ids[base_id] == 1 else f"{base_id}-{seen_ids[base_id]}"
            if problem_id != base_id:
                logger.warning("duplicate id %s disambiguated to %s", base_id, problem_id)
            problems.append(
                Problem(
                    id=problem_id,
                    statement=str(row[text_col]),
                    gold_answer=str(answer),
                    source=Source.AIME,
                )
            )
    return Dataset(name="aime", problems=problems, answer_policy=JudgePolicy(integer_mode=True))


def load_gsm8k(file: Union[str, Path]) -> Dataset:
    """JSONL of question/answer records; the gold value follows "#### "."""
    path = Path(file)
    problems = []
    skipped = 0
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
                question = payload["question"]
                answer_text = payload["answer"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                logger.warning("skipping line %d: %s", lineno, exc)
                skipped += 1
                continue
            marker = answer_text.rfind("#### ")
            if marker == -1:
                logger.warning("skipping line %d: no #### marker", lineno)
                skipped += 1
                continue
            gold = answer_text[marker + 5 :].splitlines()[0].strip().replace(",", "")
            problems.append(
                Problem(
                    id=str(payload.get("id", f"gsm8k-{lineno}")),
                    statement=str(question),
                    gold_answer=gold,
                    source=Source.GSM8K,
                )
            )
    if skipped:
        logger.warning("gsm8k loader skipped %d lines", skipped)
    return Dataset(name="gsm8k", problems=problems, answer_policy=JudgePolicy())


# ---------------------------------------------------------------------------
# Balanced sampling


def balanced_sample(dataset: Dataset, per_bin: int, seed: int) -> SampledDataset:
    """Seeded uniform draw of up to per_bin problems from every subject-level
    bin; shortfall bins contribute what they have and are reported."""
    if not dataset.problems:
        raise IipcError("cannot sample an empty dataset")
    for problem in dataset.problems:
        if problem.subject is None or problem.level is None:
            raise IipcError(f"problem {problem.id} lacks subject/level metadata")

    bins: dict[tuple[str, int], list[Problem]] = {}
    for problem in dataset.problems:
        bins.setdefault((problem.subject, problem.level), []).append(problem)

    rng = random.Random(seed)
    chosen: list[Problem] = []
    manifest: dict[str, dict] = {}
    for subject in MATH_SUBJECTS:
        for level in range(1, 6):
            members = sorted(bins.get((subject, level), []), key=lambda p: p.id)
            take = min(per_bin, len(members))
            picked = rng.sample(members, take) if take else []
            chosen.extend(sorted(picked, key=lambda p: p.id))
            manifest[f"{subject}|{level}"] = {
                "available": len(members),
                "taken": take,
                "shortfall": per_bin - take,
            }
    shortfalls = {k: v for k, v in manifest.items() if v["shortfall"] > 0}
    if shortfalls:
        logger.warning("sampling shortfalls in %d bins", len(shortfalls))
    return SampledDataset(
        name=f"{dataset.name}-sampled",
        problems=chosen,
        answer_policy=dataset.answer_policy,
        manifest=manifest,
    )


# ---------------------------------------------------------------------------
# Batch evaluation


@dataclass(frozen=True)
class EvalRow:
    problem_id: str
    verdict: Optional[Verdict]
    halt_reason: Optional[HaltReason]
    token_usage: TokenUsage
    wall_time: float
    failure: Optional[str] = None


@dataclass
class EvalResult:
    dataset: str
    rows: list[EvalRow]
    accuracy: float
    by_level: dict[int, float]
    by_subject: dict[str, float]
    judge_stats: JudgeStats
    notes: list[str] = field(default_factory=list)

    @property
    def correct(self) -> int:
        return sum(1 for row in self.rows if row.verdict and row.verdict.correct)


class _OrderedTraceWriter:
    """Serializes trace lines into dataset order behind a single lock."""

    def __init__(self, sink: Optional[BinaryIO]):
        self._sink = sink
        self._lock = threading.Lock()
        self._pending: dict[int, TraceRecord] = {}
        self._next = 0

    def submit(self, index: int, record: Optional[TraceRecord]) -> None:
        with self._lock:
            self._pending[index] = record
            while self._next in self._pending:
                ready = self._pending.pop(self._next)
                if ready is not None and self._sink is not None:
                    write_trace(ready, self._sink)
                self._next += 1


def _accuracy(rows: Sequence[EvalRow]) -> float:
    if not rows:
        return 0.0
    return 100.0 * sum(1 for r in rows if r.verdict and r.verdict.correct) / len(rows)


def run_eval(
    dataset: Dataset,
    config: RunConfig,
    backend: Backend,
    exec_backend: ExecutionBackend,
    workers: int = 1,
    trace_sink: Optional[BinaryIO] = None,
    judge_backend: Optional[Backend] = None,
    catalog: Optional[TemplateCatalog] = None,
    meter: Optional[UsageMeter] = None,
) -> EvalResult:
    """Solve, judge, and trace every problem; failures are isolated."""
    if not dataset.problems:
        raise IipcError("cannot evaluate an empty dataset")
    stats = JudgeStats()
    writer = _OrderedTraceWriter(trace_sink)
    rows: list[Optional[EvalRow]] = [None] * len(dataset.problems)

    def solve(index: int, problem: Problem) -> None:
        start = time.monotonic()
        try:
            record = run_full(problem, config, backend, exec_backend, catalog, meter)
            verdict = None
            if record.failure is not None:
                verdict = Verdict(False, VerifyMethod.LLM_JUDGE, f"engine failure: {record.failure}")
            elif problem.gold_answer is not None:
                verdict = judge(
                    problem,
                    record.final_answer,
                    problem.gold_answer,
                    dataset.answer_policy,
                    backend=judge_backend,
                    model=config.model,
                    stats=stats,
                    catalog=catalog,
                )
            record = replace(record, verdict=verdict)
            writer.submit(index, record)
            rows[index] = EvalRow(
                problem_id=problem.id,
                verdict=verdict,
                halt_reason=record.halt_reason,
                token_usage=record.token_usage,
                wall_time=time.monotonic() - start,
                failure=record.failure,
            )
        except Exception as exc:  # noqa: BLE001 - isolation is the contract
            logger.warning("problem %s failed: %s", problem.id, exc)
            writer.submit(index, None)
            rows[index] = EvalRow(
                problem_id=problem.id,
                verdict=Verdict(False, VerifyMethod.LLM_JUDGE, f"engine failure: {exc}"),
                halt_reason=None,
                token_usage=TokenUsage(),
                wall_time=time.monotonic() - start,
                failure=str(exc),
            )

    if workers <= 1:
        for index, problem in enumerate(dataset.problems):
            solve(index, problem)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(solve, index, problem)
                for index, problem in enumerate(dataset.problems)
            ]
            for future in futures:
                future.result()

    done = [row for row in rows if row is not None]
    return aggregate(dataset, done, stats)


def aggregate(dataset: Dataset, rows: Sequence[EvalRow], stats: JudgeStats) -> EvalResult:
    """Overall and stratified accuracy plus verification-method shares."""
    by_id = {p.id: p for p in dataset.problems}
    notes = []

    level_rows: dict[int, list[EvalRow]] = {}
    subject_rows: dict[str, list[EvalRow]] = {}
    for row in rows:
        problem = by_id.get(row.problem_id)
        if problem is None:
            continue
        if problem.level is not None:
            level_rows.setdefault(problem.level, []).append(row)
        if problem.subject is not None:
            subject_rows.setdefault(problem.subject, []).append(row)

    by_level = {level: round(_accuracy(group), 1) for level, group in sorted(level_rows.items())}
    by_subject = {subject: round(_accuracy(group), 1) for subject, group in sorted(subject_rows.items())}
    if not by_level:
        notes.append("per-level table omitted: dataset has no level metadata")
    if not by_subject:
        notes.append("per-subject table omitted: dataset has no subject metadata")

    return EvalResult(
        dataset=dataset.name,
        rows=list(rows),
        accuracy=round(_accuracy(rows), 1),
        by_level=by_level,
        by_subject=by_subject,
        judge_stats=stats,
        notes=notes,
    )


def write_reports(result: EvalResult, out_dir: Union[str, Path]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "results.jsonl").open("w", encoding="utf-8") as handle:
        for row in result.rows:
            handle.write(
                json.dumps(
                    {
                        "id": row.problem_id,
                        "correct": bool(row.verdict.correct) if row.verdict else None,
                        "method": row.verdict.method.value if row.verdict else None,
                        "halt_reason": row.halt_reason.value if row.halt_reason else None,
                        "prompt_tokens": row.token_usage.prompt_tokens,
                        "completion_tokens": row.token_usage.completion_tokens,
                        "wall_time": round(row.wall_time, 3),
                        "failure": row.failure,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
    summary = {
        "dataset": result.dataset,
        "problems": len(result.rows),
        "accuracy": result.accuracy,
        "by_level": result.by_level,
        "by_subject": result.by_subject,
        "judging": result.judge_stats.summary(),
        "notes": result.notes,
    }
    (out / "aggregates.json").write_text(
        json.dumps(summary, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    with (out / "accuracy_tables.csv").open("w", newline="", encoding="utf-8") as handle:
        table = csv.writer(handle)
        table.writerow(["section", "key", "accuracy_percent"])
        table.writerow(["overall", "all", f"{result.accuracy:.1f}"])
        for level, acc in result.by_level.items():
            table.writerow(["level", level, f"{acc:.1f}"])
        for subject, acc in result.by_subject.items():
            table.writerow(["subject", subject, f"{acc:.1f}"])


# ---------------------------------------------------------------------------
# Voting


@dataclass(frozen=True)
class VoteBucket:
    representative: str
    count: int
    first_index: int


@dataclass(frozen=True)
class VoteResult:
    answer: str
    buckets: tuple[VoteBucket, ...]
    voters: int
    abstentions: int
    records: tuple[TraceRecord, ...]


def _bucket_votes(answers: Sequence[str], policy: JudgePolicy) -> list[list[int]]:
    """Group answers by deterministic equivalence; no LLM is consulted."""
    groups: list[list[int]] = []
    canon = [CanonicalAnswer.from_raw(a) for a in answers]
    for index, answer in enumerate(canon):
        placed = False
        for group in groups:
            rep = canon[group[0]]
            if equal(answer, rep, policy).outcome is Outcome.EQUAL:
                group.append(index)
                placed = True
                break
        if not placed:
            groups.append([index])
    return groups


def vote(
    problem: Problem,
    config: RunConfig,
    backend: Backend,
    exec_backend: ExecutionBackend,
    policy: Optional[JudgePolicy] = None,
    min_voters: int = 5,
    max_voters: int = 7,
    vote_temperature: float = 0.7,
    catalog: Optional[TemplateCatalog] = None,
    meter: Optional[UsageMeter] = None,
) -> VoteResult:
    """Plurality over repeated runs at the voting temperature.

    A tie after the minimum round adds voters up to the maximum; a tie that
    survives the maximum resolves to the tied bucket whose first vote arrived
    earliest. Voter failures abstain and shrink the effective electorate.
    """
    policy = policy or JudgePolicy()
    vote_config = replace(config, temperature=vote_temperature)
    answers: list[str] = []
    records: list[TraceRecord] = []
    abstentions = 0

    def run_one() -> None:
        nonlocal abstentions
        try:
            record = run_full(problem, vote_config, backend, exec_backend, catalog, meter)
            records.append(record)
            if record.failure is not None:
                abstentions += 1
            else:
                answers.append(record.final_answer)
        except Exception as exc:  # noqa: BLE001
            logger.warning("voter failed on %s: %s", problem.id, exc)
            abstentions += 1

    for _ in range(min_voters):
        run_one()

    def leaders() -> tuple[list[list[int]], list[list[int]]]:
        groups = _bucket_votes(answers, policy)
        if not groups:
            return [], []
        top = max(len(g) for g in groups)
        return groups, [g for g in groups if len(g) == top]

    groups, top = leaders()
    if len(top) > 1:
        while len(answers) + abstentions < max_voters:
            run_one()
        groups, top = leaders()

    if not groups:
        return VoteResult(answer="", buckets=(), voters=0, abstentions=abstentions, records=tuple(records))

    # Persistent tie: earliest-first bucket wins deterministically.
    winner = min(top, key=lambda g: g[0])
    buckets = tuple(
        VoteBucket(representative=answers[g[0]], count=len(g), first_index=g[0])
        for g in groups
    )
    return VoteResult(
        answer=answers[winner[0]],
        buckets=buckets,
        voters=len(answers),
        abstentions=abstentions,
        records=tuple(records),
    )
