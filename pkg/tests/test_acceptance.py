"""Acceptance suite: one test per gate criterion, each printing a PASS line.

Everything here runs offline against scripted models, scripted executors, and
committed cassette fixtures. The live smoke test at the end is optional and
only runs when IIPC_LIVE_SMOKE=1.
"""

import json
import os
import random
import re
import time
from collections import Counter

import pytest

from fixture_world import FIXTURES, WORLDS, replay_eval, write_math_problem
from iipc.core import (
    Action,
    Budget,
    ErrorKind,
    ExecutionOutput,
    HaltReason,
    Problem,
    TokenUsage,
)
from iipc.errors import BackendError, InvariantViolation
from iipc.executor import ScriptedRunner, source_key
from iipc.harness import balanced_sample, load_gsm8k, load_math, run_eval, vote
from iipc.judge import CanonicalAnswer, JudgePolicy, Outcome, equal
from iipc.llm import Cassette, ChatResponse, ReplayBackend, ScriptedBackend, Tag
from iipc.refine import (
    Engine,
    RunConfig,
    Variant,
    independence_violations,
    max_loop_calls,
    revisit_indicators,
    revisit_regret,
)
from iipc.trace import canonical_line, read_trace

PROBLEM = Problem(id="ep", statement="[ep] Solve the equation.", gold_answer="1")


def _report(name: str) -> None:
    print(f"ACCEPTANCE PASS: {name}")


# ---------------------------------------------------------------------------
# 1. State-machine conformance: 1,000 randomized scripted episodes


class RandomModel:
    """Seeded adversarial model: mixes clean, revising, and garbled replies."""

    def __init__(self, rng: random.Random):
        self.rng = rng
        self.calls = Counter()
        self.counter = 0

    def _source(self) -> str:
        self.counter += 1
        return f"import math\n# step {self.counter}, verify below\nprint({self.counter})"

    def _fenced(self, prose: str) -> str:
        return f"{prose}\n```python\n{self._source()}\n```"

    def complete(self, request):
        self.calls[request.tag] += 1
        tag = request.tag
        roll = self.rng.random()
        if tag is Tag.INIT:
            content = "1. given a\n2. given b"
        elif tag is Tag.PROG:
            content = "no code this time" if roll < 0.12 else self._fenced("initial attempt")
        elif tag is Tag.VAL:
            if roll < 0.35:
                content = "SOLUTION_SATISFACTORY"
            elif roll < 0.8:
                content = self._fenced(f"flaw {self.counter} in the bounds")
            else:
                content = "unsure, no revision offered"
        elif tag is Tag.ERR:
            if roll < 0.75:
                content = self._fenced(f"crash {self.counter} repaired")
            else:
                content = "cannot repair"
        else:  # cot / comb
            content = "Step 1.\nThe final answer is: $\\boxed{1}$"
        return ChatResponse(content=content, usage=TokenUsage(11, 7))


class RandomRunner:
    def __init__(self, rng: random.Random):
        self.rng = rng
        self.invocations = 0

    def run(self, source, limits):
        self.invocations += 1
        if self.rng.random() < 0.45:
            return ExecutionOutput("", "Traceback (most recent call last):\nboom", 1, 0.0)
        return ExecutionOutput("1\n", "", 0, 0.0)


def _run_episode(rng: random.Random) -> None:
    variant = rng.choice([Variant.IIPC, Variant.IIPC_NS, Variant.IIPC_NS_NMS])
    token_budget = rng.choice([None] * 9 + [rng.choice([1, 200, 2000])])
    config = RunConfig(variant=variant, budget=Budget(token_budget=token_budget))
    model = RandomModel(rng)
    engine = Engine(model, RandomRunner(rng), config)

    state = engine.begin(PROBLEM)
    seen_events = len(state.events)
    while not state.halted:
        mem_before = len(state.memory)
        store_before = len(state.store)
        validations_before = state.budget.validations_used
        engine.step(state)

        # I1: memory grows by exactly one on revisions, never shrinks.
        new_events = state.events[seen_events:]
        seen_events = len(state.events)
        revised = sum(1 for e in new_events if e.action is Action.REVISED)
        assert len(state.memory) == mem_before + revised
        assert len(state.memory) >= mem_before

        # I2: the store holds clean outputs only and grows by at most one.
        assert all(entry[1].ok for entry in state.store)
        assert len(state.store) - store_before in (0, 1)

        # I3: counters never exceed their caps.
        assert state.budget.validations_used <= config.budget.max_validations
        assert (
            state.budget.corrections_used_current_phase
            <= config.budget.max_corrections_per_validation
        )
        assert state.budget.validations_used >= validations_before

    # I5: exactly one halt reason; stepping a halted state is a violation.
    assert state.halted and state.halt_reason is not None
    with pytest.raises(InvariantViolation):
        engine.step(state)

    # I3: exact loop-side call bound (the documented single program re-ask
    # sits on top of the closed-form bound).
    loop_calls = sum(model.calls[t] for t in (Tag.INIT, Tag.PROG, Tag.VAL, Tag.ERR))
    bound = max_loop_calls(state.budget) + (1 if state.prog_reasked else 0)
    assert loop_calls <= bound, (loop_calls, bound, variant)
    assert model.calls[Tag.INIT] <= 1
    assert model.calls[Tag.PROG] <= 2
    assert model.calls[Tag.VAL] <= state.budget.max_validations
    per_phase = state.budget.max_corrections_per_validation
    assert model.calls[Tag.ERR] <= per_phase * (state.budget.max_validations + 1)


def test_state_machine_conformance_1000_episodes():
    start = time.monotonic()
    rng = random.Random(0x5EED)
    for _ in range(1000):
        _run_episode(rng)
    elapsed = time.monotonic() - start
    assert elapsed < 10.0, f"episodes took {elapsed:.1f}s"
    _report(f"state-machine conformance (1000 episodes in {elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# 2. Replay determinism across runs and worker counts


def test_replay_determinism_across_runs_and_workers():
    start = time.monotonic()
    for name in ("cot", "pot", "iipc"):
        golden = (FIXTURES / f"{name}.golden.jsonl").read_bytes()
        first = replay_eval(name, workers=1)
        second = replay_eval(name, workers=1)
        parallel = replay_eval(name, workers=4)
        assert first == second == parallel == golden, name
        # Canonical comparison (timing fields excluded) must agree too.
        golden_lines = [canonical_line(l) for l in golden.splitlines()]
        replay_lines = [canonical_line(l) for l in parallel.splitlines()]
        assert golden_lines == replay_lines
    elapsed = time.monotonic() - start
    assert elapsed < 5.0, f"replay took {elapsed:.1f}s"
    _report(f"replay determinism (3 fixtures, workers 1 and 4, {elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# 3. Branch independence (I4) on recorded runs


def test_branch_independence_on_recorded_iipc_runs():
    cassette = Cassette.load(FIXTURES / "iipc.cassette.json")
    cot_texts = [
        message["content"]
        for request in cassette.requests_by_tag(Tag.COT)
        for message in request["messages"]
    ]
    assert cot_texts, "fixture must contain recorded token-branch requests"
    records = [
        read_trace(line)
        for line in (FIXTURES / "iipc.golden.jsonl").read_bytes().splitlines()
    ]
    assert any(record.events for record in records)
    violations = independence_violations(records, cot_texts, min_len=20)
    assert violations == []
    _report("branch independence (zero >=20-char program fragments in cot requests)")


# ---------------------------------------------------------------------------
# 4. Judge oracle equivalence on the 30-pair corpus


def test_judge_oracle_equivalence_corpus():
    start = time.monotonic()
    rows = json.loads((FIXTURES / "equivalence_corpus.json").read_text())
    assert len(rows) == 30
    policy = JudgePolicy()
    false_equal, false_not_equal = [], []
    for row in rows:
        outcome = equal(
            CanonicalAnswer.from_raw(row["candidate"]),
            CanonicalAnswer.from_raw(row["gold"]),
            policy,
        ).outcome
        if outcome is Outcome.EQUAL and row["oracle"] != "equal":
            false_equal.append(row)
        if outcome is Outcome.NOT_EQUAL and row["oracle"] != "not-equal":
            false_not_equal.append(row)
    assert false_equal == [] and false_not_equal == []

    sqrt_pair = equal(
        CanonicalAnswer.from_raw("1.4142"), CanonicalAnswer.from_raw("\\sqrt{2}"), policy
    )
    assert sqrt_pair.outcome is Outcome.EQUAL
    assert sqrt_pair.method.value == "numeric-tolerance"
    thirds = equal(CanonicalAnswer.from_raw("2/3"), CanonicalAnswer.from_raw("0.66"), policy)
    assert thirds.outcome is Outcome.NOT_EQUAL
    elapsed = time.monotonic() - start
    assert elapsed < 2.0
    _report(f"judge oracle equivalence (30 pairs, zero false decisions, {elapsed:.2f}s)")


# ---------------------------------------------------------------------------
# 5. Sampler arithmetic: 33 full bins + 2 short bins -> 1483


def test_sampler_arithmetic_1483(tmp_path):
    from iipc.core import MATH_SUBJECTS

    short_bins = {("Geometry", 5), ("Precalculus", 4)}
    for subject in MATH_SUBJECTS:
        subject_dir = subject.lower().replace(" & ", "_and_").replace(" ", "_")
        for level in range(1, 6):
            count = 32 if (subject, level) in short_bins else 44
            for i in range(count):
                write_math_problem(
                    tmp_path,
                    subject_dir,
                    f"{level}-{i}",
                    level=f"Level {level}",
                    subject=subject,
                    boxed=str(i),
                )
    dataset = load_math(tmp_path)
    sampled = balanced_sample(dataset, per_bin=43, seed=11)
    assert len(sampled.problems) == 1483  # 33 * 43 + 2 * 32
    assert len({p.id for p in sampled.problems}) == 1483
    again = balanced_sample(dataset, per_bin=43, seed=11)
    assert [p.id for p in again.problems] == [p.id for p in sampled.problems]
    shortfalls = {k: v for k, v in sampled.manifest.items() if v["shortfall"]}
    assert set(shortfalls) == {"Geometry|5", "Precalculus|4"}
    assert all(v["taken"] == 32 for v in shortfalls.values())
    _report("sampler arithmetic (35 bins, per-bin 43 -> 1483, seed-stable)")


# ---------------------------------------------------------------------------
# 6. Voting protocol


def _vote_with(answers):
    state = {"voter": -1}

    def handler(request):
        if request.tag is Tag.INIT:
            state["voter"] += 1
            return "1. fact"
        assert request.temperature == 0.7
        answer = answers[state["voter"]]
        if answer is None:
            raise BackendError("voter crashed")
        return f"The final answer is: $\\boxed{{{answer}}}$"

    return vote(
        Problem(id="v", statement="What?", gold_answer="A"),
        RunConfig(variant=Variant.COT),
        ScriptedBackend(handler=handler),
        ScriptedRunner(outputs=[]),
        policy=JudgePolicy(),
        min_voters=5,
        max_voters=7,
        vote_temperature=0.7,
    )


def test_voting_protocol_exact():
    plurality = _vote_with(["A", "A", "B", "A", "C"])
    assert plurality.answer == "A" and plurality.voters == 5

    extended = _vote_with(["A", "A", "B", "B", "C", "A", "A"])
    assert extended.voters == 7 and extended.answer == "A"

    persistent = _vote_with(["A", "A", "B", "B", "C", "B", "A"])
    assert persistent.voters == 7 and persistent.answer == "A"  # earliest-first bucket

    abstain = _vote_with(["A", None, "B", "A", "A"])
    assert abstain.abstentions == 1
    assert sum(bucket.count for bucket in abstain.buckets) == abstain.voters == 4
    _report("voting protocol (plurality, 6th/7th tie-break, earliest-bucket)")


# ---------------------------------------------------------------------------
# 7. Revisit-regret mechanism under the memory-sensitive scripted model

BAD_OS = "import os\n# reuse the process table\nprint(os.getpid())"
RUNTIME_BUG = "import math\n# divide the total\ntotal = 10\nprint(total / 0)"
CLEAN = "import math\n# correct denominator\ntotal = 10\nprint(total / 2)"


class MemorySensitiveModel:
    """Repeats the banned-import mistake iff the prompt's memory omits it."""

    def __init__(self):
        self.counter = 0

    @staticmethod
    def _memory_section(text: str) -> str:
        after = text.split("Past mistakes to avoid:", 1)
        return after[1].split("\n\n", 1)[0] if len(after) == 2 else ""

    def _fenced(self, source: str, prose: str) -> str:
        return f"{prose}\n```python\n{source}\n```"

    def complete(self, request):
        tag = request.tag
        text = request.messages[0].content
        self.counter += 1
        if tag is Tag.INIT:
            content = "1. total is 10\n2. halve it"
        elif tag is Tag.PROG:
            content = self._fenced(BAD_OS, "Using the process table for speed.")
        elif tag is Tag.ERR:
            if "disallowed import: os" in text:
                content = self._fenced(
                    RUNTIME_BUG + f"  # rev {self.counter}",
                    "I imported the banned module os; removing os from the program.",
                )
            elif re.search(r"\bos\b", self._memory_section(text)):
                content = self._fenced(
                    CLEAN + f"  # rev {self.counter}", "Fixed the zero divisor; keeping os out."
                )
            else:
                content = self._fenced(
                    BAD_OS + f"  # rev {self.counter}", "Fixed the divisor by reading os state."
                )
        elif tag is Tag.VAL:
            content = "SOLUTION_SATISFACTORY"
        else:
            content = "The final answer is: $\\boxed{5}$"
        return ChatResponse(content=content, usage=TokenUsage(5, 5))


class MemoryScenarioRunner:
    def run(self, source, limits):
        if source.startswith(CLEAN[:30]):
            return ExecutionOutput("5.0\n", "", 0, 0.0)
        return ExecutionOutput(
            "", "Traceback (most recent call last):\nZeroDivisionError: division by zero", 1, 0.0
        )


def _memory_scenario(variant: Variant):
    config = RunConfig(
        variant=variant, budget=Budget(max_validations=2, max_corrections_per_validation=4)
    )
    engine = Engine(MemorySensitiveModel(), MemoryScenarioRunner(), config)
    return engine.run_full(Problem(id="m", statement="[m] Halve the total.", gold_answer="5"))


def test_revisit_regret_mechanism():
    without_memory = _memory_scenario(Variant.IIPC_NS_NMS)
    with_memory = _memory_scenario(Variant.IIPC)

    assert len(without_memory.events) >= 4  # the constructed 4-iteration scenario
    assert revisit_regret(without_memory) >= 2
    assert revisit_regret(with_memory) == 0
    assert revisit_regret(with_memory) < revisit_regret(without_memory)

    # Once a descriptor exists, the consulting variant's indicator never rises.
    flags = revisit_indicators(with_memory)
    first_descriptor = next(
        (i for i, event in enumerate(with_memory.events) if event.descriptor), None
    )
    assert first_descriptor is not None
    tail = flags[first_descriptor:]
    assert all(a >= b for a, b in zip(tail, tail[1:]))
    _report(
        f"revisit regret (R_T without memory = {revisit_regret(without_memory)}, with memory = 0)"
    )


# ---------------------------------------------------------------------------
# 8. Program-of-thoughts fallback to the token branch


def test_pot_fallback_to_cot():
    retry_limit = 4
    err_scripts = [
        f"attempt {i}\n```python\nimport math\n# retry {i}\nprint(x)\n```" for i in range(retry_limit)
    ]
    backend = ScriptedBackend(
        by_tag={
            Tag.INIT: ["1. fact"],
            Tag.PROG: ["```python\nimport math\nprint(x)\n```"],
            Tag.ERR: err_scripts,
            Tag.COT: ["Step 1: reason in text.\nThe final answer is: $\\boxed{77}$"],
        }
    )
    error = ExecutionOutput("", "Traceback (most recent call last):\nNameError: x", 1, 0.0)
    runner = ScriptedRunner(outputs=[error] * (retry_limit + 1))
    engine = Engine(backend, runner, RunConfig(variant=Variant.POT, pot_retry_limit=retry_limit))
    record = engine.run_full(Problem(id="f", statement="[f] Find x.", gold_answer="77"))
    assert record.halt_reason is HaltReason.CORRECTION_BUDGET
    assert record.cot is not None
    assert record.final_answer == "77"
    assert all(event.output.classification.value == "error" for event in record.events)
    _report("program-of-thoughts fallback (all retries error -> token-branch answer)")


# ---------------------------------------------------------------------------
# Optional, non-gating live smoke test


@pytest.mark.skipif(os.environ.get("IIPC_LIVE_SMOKE") != "1", reason="live smoke disabled")
def test_live_smoke_gsm8k():
    from iipc.executor import SubprocessRunner
    from iipc.llm import HttpBackend

    dataset_path = os.environ["IIPC_SMOKE_DATASET"]
    endpoint = os.environ.get("IIPC_SMOKE_ENDPOINT", "https://api.openai.com/v1")
    model = os.environ["IIPC_SMOKE_MODEL"]

    dataset = load_gsm8k(dataset_path)
    dataset.problems = dataset.problems[:10]
    config = RunConfig(variant=Variant.IIPC, model=model)
    backend = HttpBackend(endpoint)
    result = run_eval(dataset, config, backend, SubprocessRunner(), judge_backend=backend)
    print(f"live smoke accuracy: {result.accuracy:.1f}%")
    print(f"deterministic fraction: {100.0 * result.judge_stats.deterministic_fraction():.1f}%")
    assert result.accuracy >= 70.0
    _report("live smoke (10 gsm8k problems)")
