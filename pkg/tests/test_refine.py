import pytest

from iipc.core import (
    Action,
    Budget,
    ErrorDescriptor,
    ErrorKind,
    ExecutionOutput,
    HaltReason,
    IterationEvent,
    LintReport,
    Problem,
    Program,
    PropositionSet,
    Route,
    TokenUsage,
    TraceRecord,
)
from iipc.errors import InvariantViolation
from iipc.executor import ExecLimits, ScriptedRunner, lint
from iipc.llm import ChatResponse, ScriptedBackend, Tag
from iipc.refine import (
    Engine,
    RunConfig,
    Variant,
    default_matcher,
    independence_violations,
    max_loop_calls,
    revisit_indicators,
    revisit_regret,
)

PROBLEM = Problem(id="p1", statement="In triangle ABC, AB=3 and AC=5. Find OA . BC.")

OK = ExecutionOutput("8.0\n", "", 0, 0.01)
OK2 = ExecutionOutput("-8.0\n", "", 0, 0.01)
ERR = ExecutionOutput("", "Traceback (most recent call last):\nZeroDivisionError", 1, 0.01)

PROG_1 = "import math\n# first attempt, verify at the end\nprint(8.0)"
PROG_2 = "import math\n# corrected sign, verify at the end\nprint(-8.0)"


def fenced(source: str, prose: str = "") -> str:
    block = f"```python\n{source}\n```"
    return f"{prose}\n{block}" if prose else block


def make_engine(by_tag, outputs, variant=Variant.IIPC, **config_kwargs):
    backend = ScriptedBackend(by_tag=by_tag)
    runner = ScriptedRunner(outputs=list(outputs))
    config = RunConfig(variant=variant, **config_kwargs)
    return Engine(backend, runner, config), backend, runner


def standard_tags(**overrides):
    tags = {
        Tag.INIT: ["1. AB = 3\n2. AC = 5"],
        Tag.PROG: [fenced(PROG_1)],
        Tag.VAL: ["SOLUTION_SATISFACTORY"],
        Tag.COT: ["Step 1: reason.\nThe final answer is: $\\boxed{-8}$"],
        Tag.COMB: ["Weighing both, the sign flips.\nThe final answer is: $\\boxed{-8}$"],
    }
    tags.update(overrides)
    return tags


# -- component functions -------------------------------------------------------


def test_derive_propositions_scripted():
    engine, _, _ = make_engine(standard_tags(), [OK])
    state = engine.begin(PROBLEM)
    assert list(state.propositions) == ["AB = 3", "AC = 5"]


def test_derive_propositions_empty_response_fallback(caplog):
    engine, _, _ = make_engine(standard_tags(**{Tag.INIT: [""]}), [OK])
    with caplog.at_level("WARNING"):
        state = engine.begin(PROBLEM)
    assert len(state.propositions) == 1


def test_generate_program_attaches_lint():
    engine, _, _ = make_engine(standard_tags(), [OK])
    state = engine.begin(PROBLEM)
    program, _ = state.current
    assert program.index == 1
    assert program.source == PROG_1
    assert program.lint.print_count == 1


def test_generate_program_single_reask_then_success():
    tags = standard_tags(**{Tag.PROG: ["no code, sorry", fenced(PROG_1)]})
    engine, backend, _ = make_engine(tags, [OK])
    state = engine.begin(PROBLEM)
    assert state.current is not None
    assert backend.calls_for(Tag.PROG) == 2
    reask = backend.requests[-1]
    assert "fenced code block" in reask.messages[-1].content


def test_generate_program_double_failure_goes_programless():
    tags = standard_tags(**{Tag.PROG: ["prose only", "still prose"]})
    engine, _, runner = make_engine(tags, [])
    state = engine.begin(PROBLEM)
    assert state.halted and state.halt_reason is HaltReason.NO_PROGRAM
    assert len(state.memory) == 1
    assert next(iter(state.memory)).kind is ErrorKind.FORMAT_FAILURE
    assert len(state.store) == 0
    assert runner.invocations == 0


# -- step routing ----------------------------------------------------------------


def test_step_ok_stop_stores_program_and_halts():
    engine, _, _ = make_engine(standard_tags(), [OK])
    state = engine.begin(PROBLEM)
    engine.step(state)
    assert state.halted and state.halt_reason is HaltReason.STOP_SIGNAL
    assert len(state.store) == 1
    assert len(state.memory) == 0
    assert [(e.route, e.action) for e in state.events] == [(Route.VALIDATE, Action.STOPPED)]


def test_step_error_routes_to_correction():
    tags = standard_tags(**{Tag.ERR: [fenced(PROG_2, "Division by zero on line 3.")]})
    engine, _, _ = make_engine(tags, [ERR, OK2], variant=Variant.IIPC_NS)
    state = engine.begin(PROBLEM)
    engine.step(state)
    assert not state.halted
    assert len(state.memory) == 1
    assert len(state.store) == 1  # the revision ran clean and was stored
    descriptor = next(iter(state.memory))
    assert descriptor.kind is ErrorKind.RUNTIME
    assert descriptor.text == "Division by zero on line 3."


def test_error_descriptor_kind_for_timeout_and_disallowed():
    timeout_out = ExecutionOutput("", "", -9, 2.0, timed_out=True)
    tags = standard_tags(**{Tag.ERR: [fenced(PROG_2, "It spun forever.")]})
    engine, _, _ = make_engine(tags, [timeout_out, OK2], variant=Variant.IIPC_NS)
    state = engine.begin(PROBLEM)
    engine.step(state)
    assert next(iter(state.memory)).kind is ErrorKind.TIMEOUT


def test_correction_budget_halts_after_two_in_phase():
    tags = standard_tags(
        **{
            Tag.ERR: [
                fenced(PROG_1 + " # retry 1", "attempt one"),
                fenced(PROG_1 + " # retry 2", "attempt two"),
            ]
        }
    )
    engine, backend, _ = make_engine(tags, [ERR, ERR, ERR])
    state = engine.begin(PROBLEM)
    while not state.halted:
        engine.step(state)
    assert state.halt_reason is HaltReason.CORRECTION_BUDGET
    assert backend.calls_for(Tag.ERR) == 2
    assert state.budget.corrections_used_current_phase == 2
    assert state.events[-1].action is Action.BUDGET_EXHAUSTED


def test_validation_budget_halts_after_two():
    tags = standard_tags(
        **{
            Tag.VAL: [
                fenced(PROG_1 + " # v2", "still unsure"),
                fenced(PROG_1 + " # v3", "still unsure"),
            ]
        }
    )
    engine, backend, _ = make_engine(tags, [OK, OK, OK])
    state = engine.begin(PROBLEM)
    while not state.halted:
        engine.step(state)
    assert state.halt_reason is HaltReason.VALIDATION_BUDGET
    assert backend.calls_for(Tag.VAL) == 2
    assert len(state.store) == 3  # every clean execution entered the store


def test_format_failure_on_err_route_spends_correction():
    tags = standard_tags(**{Tag.ERR: ["I cannot fix this.", "Still no code."]})
    engine, backend, _ = make_engine(tags, [ERR])
    state = engine.begin(PROBLEM)
    engine.step(state)
    assert not state.halted
    assert state.budget.corrections_used_current_phase == 1
    assert next(iter(state.memory)).kind is ErrorKind.FORMAT_FAILURE
    engine.step(state)
    engine.step(state)
    assert state.halt_reason is HaltReason.CORRECTION_BUDGET
    assert backend.calls_for(Tag.ERR) == 2


def test_stop_sentinel_on_error_route_is_format_failure():
    tags = standard_tags(**{Tag.ERR: ["SOLUTION_SATISFACTORY", "SOLUTION_SATISFACTORY"]})
    engine, _, _ = make_engine(tags, [ERR])
    state = engine.begin(PROBLEM)
    engine.step(state)
    assert next(iter(state.memory)).kind is ErrorKind.FORMAT_FAILURE


def test_step_on_halted_state_is_contract_violation():
    engine, _, _ = make_engine(standard_tags(), [OK])
    state = engine.begin(PROBLEM)
    engine.step(state)
    assert state.halted
    with pytest.raises(InvariantViolation):
        engine.step(state)


def test_token_budget_halts_before_next_call():
    budget = Budget(token_budget=1)
    engine, backend, _ = make_engine(standard_tags(), [OK], budget=budget)
    record = engine.run_full(PROBLEM)
    assert record.halt_reason is HaltReason.TOKEN_BUDGET
    assert backend.calls_for(Tag.INIT) == 1  # first call allowed, then cut off


# -- loop per variant -------------------------------------------------------------


def test_iipc_loop_store_ordering():
    tags = standard_tags(
        **{Tag.VAL: [fenced(PROG_2, "The sign is wrong."), "SOLUTION_SATISFACTORY"]}
    )
    engine, _, _ = make_engine(tags, [OK, OK2])
    state, events = engine.loop(PROBLEM)
    assert state.halt_reason is HaltReason.STOP_SIGNAL
    assert len(state.store) == 2
    assert state.store.best[0].source == PROG_2
    assert [e.action for e in events] == [Action.REVISED, Action.STOPPED]


def test_pot_corrections_only_first_ok_halts():
    tags = standard_tags(**{Tag.ERR: [fenced(PROG_2, "Fixed the crash.")]})
    engine, backend, _ = make_engine(tags, [ERR, OK2], variant=Variant.POT)
    state, events = engine.loop(PROBLEM)
    assert state.halt_reason is HaltReason.STOP_SIGNAL
    assert backend.calls_for(Tag.VAL) == 0
    assert backend.calls_for(Tag.ERR) == 1
    assert len(state.store) == 1
    assert [e.action for e in events] == [Action.REVISED, Action.STOPPED]


def test_pot_nc_halts_immediately_on_error():
    engine, backend, _ = make_engine(standard_tags(), [ERR], variant=Variant.POT_NC)
    state, _ = engine.loop(PROBLEM)
    assert state.halt_reason is HaltReason.CORRECTION_BUDGET
    assert len(state.store) == 0
    assert backend.calls_for(Tag.ERR) == 0


def test_pot_retry_limit_governs_corrections():
    err_scripts = [fenced(PROG_1 + f" # fix {i}", f"attempt {i}") for i in range(4)]
    engine, backend, _ = make_engine(
        standard_tags(**{Tag.ERR: err_scripts}), [ERR] * 5, variant=Variant.POT, pot_retry_limit=4
    )
    state, _ = engine.loop(PROBLEM)
    assert state.halt_reason is HaltReason.CORRECTION_BUDGET
    assert backend.calls_for(Tag.ERR) == 4


# -- branches ----------------------------------------------------------------------


def test_cot_variant_never_executes():
    engine, backend, runner = make_engine(standard_tags(), [], variant=Variant.COT)
    record = engine.run_full(PROBLEM)
    assert runner.invocations == 0
    assert record.final_answer == "-8"
    assert record.events == ()
    assert backend.calls_for(Tag.PROG) == 0
    assert record.cot is not None and record.cot.provisional_answer == "-8"


def test_cot_request_contains_no_program_fragments():
    engine, backend, _ = make_engine(standard_tags(), [OK])
    record = engine.run_full(PROBLEM)
    cot_texts = [
        m.content for r in backend.requests if r.tag is Tag.COT for m in r.messages
    ]
    assert cot_texts
    assert independence_violations([record], cot_texts) == []


def test_iipc_combines_program_and_cot():
    engine, backend, _ = make_engine(standard_tags(), [OK])
    record = engine.run_full(PROBLEM)
    assert record.final_answer == "-8"
    assert record.integration_prompt is not None
    assert PROG_1 in record.integration_prompt
    assert "8.0" in record.integration_prompt
    comb_request = [r for r in backend.requests if r.tag is Tag.COMB][0]
    assert "Independent reasoning" in comb_request.messages[0].content


def test_iipc_empty_store_renders_no_program_sentence():
    tags = standard_tags(**{Tag.PROG: ["prose", "more prose"]})
    engine, _, _ = make_engine(tags, [])
    record = engine.run_full(PROBLEM)
    assert "no working program was produced" in record.integration_prompt
    assert record.final_answer == "-8"
    assert record.halt_reason is HaltReason.NO_PROGRAM


def test_iipc_ns_uses_program_only_integration():
    engine, backend, _ = make_engine(standard_tags(), [OK], variant=Variant.IIPC_NS)
    record = engine.run_full(PROBLEM)
    assert backend.calls_for(Tag.COT) == 0
    assert record.cot is None
    assert "Independent reasoning" not in record.integration_prompt
    assert record.final_answer == "-8"


def test_pot_answers_from_program_stdout():
    tags = standard_tags(**{Tag.PROG: [fenced("print('The final answer is: 625')")]})
    outputs = [ExecutionOutput("The final answer is: 625\n", "", 0, 0.01)]
    engine, backend, _ = make_engine(tags, outputs, variant=Variant.POT)
    record = engine.run_full(PROBLEM)
    assert record.final_answer == "625"
    assert backend.calls_for(Tag.COT) == 0
    assert backend.calls_for(Tag.COMB) == 0


def test_pot_all_errors_falls_back_to_cot():
    err_scripts = [fenced(PROG_1 + f" # fix {i}", f"attempt {i}") for i in range(4)]
    engine, backend, _ = make_engine(
        standard_tags(**{Tag.ERR: err_scripts}), [ERR] * 5, variant=Variant.POT
    )
    record = engine.run_full(PROBLEM)
    assert record.halt_reason is HaltReason.CORRECTION_BUDGET
    assert backend.calls_for(Tag.COT) == 1
    assert record.final_answer == "-8"
    assert record.cot is not None


def test_memory_rendered_none_for_nms_but_descriptors_logged():
    tags = standard_tags(
        **{
            Tag.ERR: [
                fenced(PROG_1 + " # fix a", "bad denominator"),
                fenced(PROG_1 + " # fix b", "bad denominator again"),
            ]
        }
    )
    engine, backend, _ = make_engine(tags, [ERR, ERR, ERR], variant=Variant.IIPC_NS_NMS)
    state, _ = engine.loop(PROBLEM)
    err_requests = [r for r in backend.requests if r.tag is Tag.ERR]
    for request in err_requests:
        assert "Past mistakes to avoid:\nnone" in request.messages[0].content
    assert len(state.memory) == 2  # still logged for instrumentation


def test_memory_rendered_in_full_variant_prompts():
    tags = standard_tags(
        **{
            Tag.ERR: [
                fenced(PROG_1 + " # fix a", "bad denominator"),
                fenced(PROG_1 + " # fix b", "something else"),
            ]
        }
    )
    engine, backend, _ = make_engine(tags, [ERR, ERR, ERR], variant=Variant.IIPC)
    engine.loop(PROBLEM)
    second_err = [r for r in backend.requests if r.tag is Tag.ERR][1]
    assert "1. bad denominator" in second_err.messages[0].content


def test_run_full_records_failure_but_emits_record():
    backend = ScriptedBackend(by_tag={Tag.INIT: ["1. fact"]})  # prog script missing
    engine = Engine(backend, ScriptedRunner(outputs=[]), RunConfig())
    record = engine.run_full(PROBLEM)
    assert record.failure is not None
    assert record.final_answer == "[engine-failure]"


def test_max_loop_calls_formula():
    assert max_loop_calls(Budget()) == 10
    assert max_loop_calls(Budget(max_validations=1, max_corrections_per_validation=3)) == 9


# -- revisit regret -----------------------------------------------------------------


def _program(index, source):
    return Program(index=index, source=source, lint=lint(source))


def _event(program, output, route, action, descriptor=None):
    return IterationEvent(program, output, route, action, descriptor)


def _record(events):
    return TraceRecord(
        problem=PROBLEM,
        propositions=PropositionSet(("f",)),
        events=tuple(events),
        cot=None,
        integration_prompt=None,
        final_text="x",
        final_answer="x",
        token_usage=TokenUsage(),
        config_fingerprint="sha256:t",
    )


def test_regret_zero_with_empty_memory():
    record = _record(
        [_event(_program(1, "print(1)"), OK, Route.VALIDATE, Action.STOPPED)]
    )
    assert revisit_regret(record) == 0


def test_regret_counts_reimported_banned_module():
    bad = "import os\nprint(os.getpid())"
    d1 = ErrorDescriptor(1, ErrorKind.DISALLOWED_IMPORT, "the program imported the banned module os")
    events = [
        _event(_program(1, bad), ERR, Route.CORRECT, Action.REVISED, d1),
        _event(_program(2, bad), ERR, Route.CORRECT, Action.BUDGET_EXHAUSTED),
    ]
    assert revisit_regret(_record(events)) >= 1


def test_regret_exact_count_on_hand_enumerated_trace():
    # Hand enumeration: repeats occur at iterations 2 and 4 only.
    bad = "import os\nprint(1)"
    clean = "import math\nprint(1)"
    d1 = ErrorDescriptor(1, ErrorKind.DISALLOWED_IMPORT, "imported banned module os")
    d2 = ErrorDescriptor(2, ErrorKind.DISALLOWED_IMPORT, "imported os again")
    d3 = ErrorDescriptor(3, ErrorKind.LOGIC_FLAW, "sign error in the area formula")
    events = [
        _event(_program(1, bad), ERR, Route.CORRECT, Action.REVISED, d1),      # memory empty -> 0
        _event(_program(2, bad), ERR, Route.CORRECT, Action.REVISED, d2),      # repeats d1 -> 1
        _event(_program(3, clean), OK, Route.VALIDATE, Action.REVISED, d3),    # clean -> 0
        _event(_program(4, bad), ERR, Route.CORRECT, Action.BUDGET_EXHAUSTED), # repeats d1/d2 -> 1
    ]
    record = _record(events)
    assert revisit_indicators(record) == [0, 1, 0, 1]
    assert revisit_regret(record) == 2


def test_default_matcher_uses_word_boundaries():
    program = _program(1, "import os\nprint(1)")
    descriptor = ErrorDescriptor(1, ErrorKind.DISALLOWED_IMPORT, "the chaos was total")
    assert not default_matcher(program, descriptor)


def test_default_matcher_recursion_flags():
    program = _program(1, "def solve(n):\n    return solve(n - 1)")
    descriptor = ErrorDescriptor(1, ErrorKind.RUNTIME, "function solve recursed past the limit")
    assert default_matcher(program, descriptor)
