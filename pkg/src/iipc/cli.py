"""Operator surface: solve one problem, evaluate a dataset, judge prediction
files, sample datasets, and inspect cassettes.

A JSON config file supplies defaults; command-line flags always win. Exit
codes: 0 success, 1 run failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path
from typing import Optional

from .core import Budget, Problem, Source
from .errors import IipcError
from .executor import DEFAULT_ALLOWLIST, ExecLimits, ScriptedRunner, SubprocessRunner
from .harness import (
    Dataset,
    balanced_sample,
    load_aime,
    load_gsm8k,
    load_math,
    run_eval,
    vote,
    write_reports,
)
from .judge import JudgePolicy, JudgeStats, judge
from .llm import (
    DEFAULT_API_KEY_ENV,
    Cassette,
    HttpBackend,
    RecordingBackend,
    ReplayBackend,
)
from .refine import RunConfig, Variant, run_full
from .trace import write_trace

logger = logging.getLogger(__name__)

_MODES = ("live", "record", "replay")


def _load_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _setting(args: argparse.Namespace, file_config: dict, name: str, default=None):
    value = getattr(args, name, None)
    if value is not None:
        return value
    return file_config.get(name, default)


def _build_run_config(args: argparse.Namespace, file_config: dict) -> RunConfig:
    allowlist = _setting(args, file_config, "allowlist")
    if isinstance(allowlist, str):
        allowlist = [item.strip() for item in allowlist.split(",") if item.strip()]
    budget = Budget(
        max_validations=int(_setting(args, file_config, "max_validations", 2)),
        max_corrections_per_validation=int(_setting(args, file_config, "max_corrections", 2)),
        token_budget=_setting(args, file_config, "token_budget"),
    )
    return RunConfig(
        variant=Variant(_setting(args, file_config, "variant", "iipc")),
        model=str(_setting(args, file_config, "model", "offline")),
        temperature=float(_setting(args, file_config, "temperature", 0.1)),
        budget=budget,
        exec_limits=ExecLimits(timeout=float(_setting(args, file_config, "exec_timeout", 30.0))),
        pot_retry_limit=int(_setting(args, file_config, "pot_retry_limit", 4)),
        seed=_setting(args, file_config, "seed"),
        allowlist=frozenset(allowlist) if allowlist else DEFAULT_ALLOWLIST,
        max_tokens=_setting(args, file_config, "max_tokens"),
    )


def _build_backend(args: argparse.Namespace, file_config: dict):
    mode = _setting(args, file_config, "mode", "live")
    if mode not in _MODES:
        raise IipcError(f"unknown mode {mode!r}")
    cassette_path = _setting(args, file_config, "cassette")
    endpoint = _setting(args, file_config, "endpoint", "https://api.openai.com/v1")
    api_key_env = _setting(args, file_config, "api_key_env", DEFAULT_API_KEY_ENV)
    timeout = float(_setting(args, file_config, "request_timeout", 120.0))

    if mode == "replay":
        if not cassette_path:
            raise IipcError("replay mode requires a cassette path")
        return ReplayBackend(Cassette.load(cassette_path))
    live = HttpBackend(base_url=endpoint, api_key_env=api_key_env, timeout=timeout)
    if mode == "record":
        if not cassette_path:
            raise IipcError("record mode requires a cassette path")
        import os

        if not os.environ.get(api_key_env):
            raise IipcError(f"record mode requires live credentials in {api_key_env}")
        return RecordingBackend(live, path=cassette_path)
    return live


def _build_exec_backend(args: argparse.Namespace, file_config: dict, config: RunConfig):
    kind = _setting(args, file_config, "executor", "subprocess")
    if kind == "scripted":
        script_path = _setting(args, file_config, "executor_script")
        if not script_path:
            raise IipcError("scripted executor requires --executor-script")
        payload = json.loads(Path(script_path).read_text(encoding="utf-8"))
        from .core import ExecutionOutput

        by_source = {
            key: [
                ExecutionOutput(
                    stdout=o.get("stdout", ""),
                    stderr=o.get("stderr", ""),
                    exit_status=o.get("exit_status", 0),
                    wall_time=o.get("wall_time", 0.0),
                    timed_out=o.get("timed_out", False),
                )
                for o in outputs
            ]
            for key, outputs in payload.get("by_source", {}).items()
        }
        return ScriptedRunner(by_source=by_source)
    return SubprocessRunner(allowlist=config.allowlist)


def _load_problem(args: argparse.Namespace) -> Problem:
    if args.statement:
        return Problem(id="inline", statement=args.statement, gold_answer=args.gold)
    if args.problem_file:
        payload = json.loads(Path(args.problem_file).read_text(encoding="utf-8"))
        return Problem(
            id=str(payload.get("id", Path(args.problem_file).stem)),
            statement=payload["statement"],
            gold_answer=payload.get("gold_answer"),
            source=Source(payload.get("source", "Custom")),
        )
    raise IipcError("provide --statement or --problem-file")


def cmd_solve(args: argparse.Namespace) -> int:
    file_config = _load_config_file(args.config)
    config = _build_run_config(args, file_config)
    backend = _build_backend(args, file_config)
    exec_backend = _build_exec_backend(args, file_config, config)
    problem = _load_problem(args)

    record = run_full(problem, config, backend, exec_backend)
    if args.trace:
        with open(args.trace, "ab") as sink:
            write_trace(record, sink)
    print(f"final answer: {record.final_answer}")
    print(f"halt reason: {record.halt_reason.value if record.halt_reason else '-'}")
    if record.failure:
        print(f"failure: {record.failure}", file=sys.stderr)
        return 1
    return 0


def _load_dataset(args: argparse.Namespace) -> Dataset:
    if args.dataset == "math":
        return load_math(args.path)
    if args.dataset == "aime":
        return load_aime(args.path)
    return load_gsm8k(args.path)


def cmd_eval(args: argparse.Namespace) -> int:
    file_config = _load_config_file(args.config)
    config = _build_run_config(args, file_config)
    backend = _build_backend(args, file_config)
    exec_backend = _build_exec_backend(args, file_config, config)

    dataset = _load_dataset(args)
    sampling_manifest = None
    if args.per_bin:
        dataset = balanced_sample(dataset, per_bin=args.per_bin, seed=args.seed or 0)
        sampling_manifest = dataset.manifest
    if args.limit:
        dataset = Dataset(
            name=dataset.name,
            problems=dataset.problems[: args.limit],
            answer_policy=dataset.answer_policy,
        )

    out = Path(args.out)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    trace_path = out / "traces" / "trace.jsonl"

    if args.vote:
        stats = JudgeStats()
        rows = []
        from .harness import EvalRow, aggregate
        from .core import TokenUsage

        with open(trace_path, "wb") as sink:
            for problem in dataset.problems:
                result = vote(
                    problem,
                    config,
                    backend,
                    exec_backend,
                    policy=dataset.answer_policy,
                )
                verdict = None
                if problem.gold_answer is not None:
                    verdict = judge(
                        problem,
                        result.answer,
                        problem.gold_answer,
                        dataset.answer_policy,
                        backend=None,
                        stats=stats,
                    )
                for record in result.records:
                    write_trace(record, sink)
                usage = TokenUsage()
                for record in result.records:
                    usage = TokenUsage(
                        usage.prompt_tokens + record.token_usage.prompt_tokens,
                        usage.completion_tokens + record.token_usage.completion_tokens,
                    )
                rows.append(
                    EvalRow(
                        problem_id=problem.id,
                        verdict=verdict,
                        halt_reason=None,
                        token_usage=usage,
                        wall_time=0.0,
                    )
                )
        result = aggregate(dataset, rows, stats)
    else:
        with open(trace_path, "wb") as sink:
            result = run_eval(
                dataset,
                config,
                backend,
                exec_backend,
                workers=args.workers,
                trace_sink=sink,
                judge_backend=backend if args.llm_judge else None,
            )

    write_reports(result, out / "reports")
    if sampling_manifest is not None:
        (out / "reports" / "sampling_manifest.json").write_text(
            json.dumps(sampling_manifest, indent=2) + "\n", encoding="utf-8"
        )
    print(f"evaluated {len(result.rows)} problems: accuracy {result.accuracy:.1f}%")
    print(f"deterministic fraction {100.0 * result.judge_stats.deterministic_fraction():.1f}%")
    return 0


def cmd_judge(args: argparse.Namespace) -> int:
    predictions = {}
    for line in Path(args.predictions).read_text(encoding="utf-8").splitlines():
        if line.strip():
            payload = json.loads(line)
            predictions[str(payload["id"])] = str(payload["answer"])
    gold = {}
    for line in Path(args.gold).read_text(encoding="utf-8").splitlines():
        if line.strip():
            payload = json.loads(line)
            gold[str(payload["id"])] = str(payload["answer"])

    orphans_pred = sorted(set(predictions) - set(gold))
    orphans_gold = sorted(set(gold) - set(predictions))
    if orphans_pred or orphans_gold:
        if orphans_pred:
            print(f"ids only in predictions: {', '.join(orphans_pred)}", file=sys.stderr)
        if orphans_gold:
            print(f"ids only in gold: {', '.join(orphans_gold)}", file=sys.stderr)
        return 1

    file_config = _load_config_file(args.config)
    backend = None
    if not args.no_llm and _setting(args, file_config, "mode"):
        backend = _build_backend(args, file_config)

    policy = JudgePolicy(integer_mode=args.integer_mode, use_llm=not args.no_llm)
    stats = JudgeStats()
    correct = 0
    outcomes = Counter()
    for problem_id in sorted(gold):
        problem = Problem(id=problem_id, statement="(standalone judging)")
        verdict = judge(
            problem,
            predictions[problem_id],
            gold[problem_id],
            policy,
            backend=backend,
            stats=stats,
        )
        outcomes[verdict.method.value] += 1
        if verdict.correct:
            correct += 1
        print(json.dumps({"id": problem_id, "correct": verdict.correct, "method": verdict.method.value}))

    total = len(gold)
    print(f"accuracy {100.0 * correct / total:.1f}% over {total} pairs")
    for method, count in sorted(outcomes.items()):
        print(f"  {method}: {count}")
    print(f"deterministic fraction {100.0 * stats.deterministic_fraction():.1f}%")
    if stats.undecided_unjudged:
        print(f"  undecided scored incorrect (no judge): {stats.undecided_unjudged}")
    return 0


def cmd_sample(args: argparse.Namespace) -> int:
    dataset = load_math(args.path)
    sampled = balanced_sample(dataset, per_bin=args.per_bin, seed=args.seed)
    payload = {
        "dataset": sampled.name,
        "seed": args.seed,
        "per_bin": args.per_bin,
        "total": len(sampled.problems),
        "ids": [p.id for p in sampled.problems],
        "bins": sampled.manifest,
    }
    text = json.dumps(payload, indent=2, ensure_ascii=False)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    print(f"sampled {len(sampled.problems)} problems", file=sys.stderr)
    return 0


def cmd_cassette(args: argparse.Namespace) -> int:
    cassette = Cassette.load(args.path)
    tags = Counter(entry.tag for entry in cassette.entries.values())
    responses = sum(len(entry.responses) for entry in cassette.entries.values())
    print(f"{len(cassette.entries)} request digests, {responses} recorded responses")
    for tag, count in sorted(tags.items()):
        print(f"  {tag}: {count}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iipc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--model")
        p.add_argument("--endpoint")
        p.add_argument("--variant", choices=[v.value for v in Variant])
        p.add_argument("--temperature", type=float)
        p.add_argument("--mode", choices=_MODES)
        p.add_argument("--cassette")
        p.add_argument("--executor", choices=("subprocess", "scripted"))
        p.add_argument("--executor-script", dest="executor_script")
        p.add_argument("--allowlist")
        p.add_argument("--seed", type=int)
        p.add_argument("--max-validations", dest="max_validations", type=int)
        p.add_argument("--max-corrections", dest="max_corrections", type=int)
        p.add_argument("--token-budget", dest="token_budget", type=int)

    solve = sub.add_parser("solve", help="solve one problem")
    add_common(solve)
    solve.add_argument("--statement")
    solve.add_argument("--problem-file", dest="problem_file")
    solve.add_argument("--gold")
    solve.add_argument("--trace", help="append the trace line to this file")
    solve.set_defaults(func=cmd_solve)

    evaluate = sub.add_parser("eval", help="evaluate a dataset")
    add_common(evaluate)
    evaluate.add_argument("--dataset", choices=("math", "aime", "gsm8k"), required=True)
    evaluate.add_argument("--path", required=True)
    evaluate.add_argument("--per-bin", dest="per_bin", type=int)
    evaluate.add_argument("--limit", type=int)
    evaluate.add_argument("--workers", type=int, default=1)
    evaluate.add_argument("--vote", action="store_true")
    evaluate.add_argument("--llm-judge", dest="llm_judge", action="store_true")
    evaluate.add_argument("--out", default="out")
    evaluate.set_defaults(func=cmd_eval)

    judging = sub.add_parser("judge", help="judge a predictions file against gold")
    judging.add_argument("--config")
    judging.add_argument("--mode", choices=_MODES)
    judging.add_argument("--cassette")
    judging.add_argument("--endpoint")
    judging.add_argument("--predictions", required=True)
    judging.add_argument("--gold", required=True)
    judging.add_argument("--integer-mode", dest="integer_mode", action="store_true")
    judging.add_argument("--no-llm", dest="no_llm", action="store_true")
    judging.set_defaults(func=cmd_judge)

    sample = sub.add_parser("sample", help="balanced-sample a dataset directory")
    sample.add_argument("--path", required=True)
    sample.add_argument("--per-bin", dest="per_bin", type=int, required=True)
    sample.add_argument("--seed", type=int, default=0)
    sample.add_argument("--out")
    sample.set_defaults(func=cmd_sample)

    cassette = sub.add_parser("cassette", help="summarize a cassette file")
    cassette.add_argument("--path", required=True)
    cassette.set_defaults(func=cmd_cassette)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except IipcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
