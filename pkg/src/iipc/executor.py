"""Static constraint linting and sandboxed execution of candidate programs.

Execution goes through a pluggable backend: SubprocessRunner drives the
external runner shim in a fresh process per program, ScriptedRunner serves
queued outputs so the whole engine test-suite runs with no shim installed.

This is best-effort isolation for generated math code, NOT a security sandbox
against adversarial programs: no syscall filtering, no network namespace.
"""

from __future__ import annotations

import ast
import hashlib
import importlib.util
import logging
import os
import re
import signal
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Sequence, Union

from .core import ExecutionOutput, LintReport
from .errors import EngineError

logger = logging.getLogger(__name__)

ALLOWLIST_ENV = "IIPC_ALLOWLIST"

# The named numerical/symbolic libraries plus benign stdlib helpers that
# generated code routinely reaches for.
DEFAULT_ALLOWLIST = frozenset(
    {
        "numpy",
        "math",
        "sympy",
        "scipy",
        "skspatial",
        "fractions",
        "decimal",
        "itertools",
        "functools",
        "collections",
        "re",
        "random",
        "string",
        "sys",
    }
)


@dataclass(frozen=True)
class ExecLimits:
    timeout: float = 30.0
    max_output_bytes: int = 1024 * 1024

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")


# ---------------------------------------------------------------------------
# Linting

_IMPORT_LINE = re.compile(r"^\s*(?:import\s+([A-Za-z_][\w.]*)|from\s+([A-Za-z_][\w.]*)\s+import)", re.MULTILINE)

_COMPREHENSIONS = (ast.ListComp, ast.SetComp, ast.DictComp, ast.GeneratorExp)


def _root(name: str) -> str:
    return name.split(".")[0]


def _collect_imports(tree: ast.AST) -> list[str]:
    roots: list[str] = []
    for node in ast.walk(tree):
        if isinstance(node, ast.Import):
            for alias in node.names:
                roots.append(_root(alias.name))
        elif isinstance(node, ast.ImportFrom):
            if node.module and node.level == 0:
                roots.append(_root(node.module))
    return roots


def _function_references(tree: ast.AST) -> dict[str, set[str]]:
    refs: dict[str, set[str]] = {}
    for node in ast.walk(tree):
        if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
            names = set()
            for child in ast.walk(node):
                if isinstance(child, ast.Name):
                    names.add(child.id)
            refs.setdefault(node.name, set()).update(names)
    return refs


def _recursion_flags(tree: ast.AST) -> list[str]:
    refs = _function_references(tree)
    flagged = []
    for name, used in refs.items():
        if name in used:
            flagged.append(name)
            continue
        # Mutual 2-cycle: f references g and g references f.
        for other in used:
            if other != name and name in refs.get(other, ()):
                flagged.append(name)
                break
    return sorted(set(flagged))


def _has_verification_comment(source: str) -> bool:
    for line in source.splitlines():
        if "#" in line and "verif" in line.split("#", 1)[1].lower():
            return True
    return False


def lint(source: str, allowlist: frozenset[str] = DEFAULT_ALLOWLIST) -> LintReport:
    """Best-effort constraint scan; never a hard stop by itself.

    Unparseable source falls back to a regex import scan so allowlist
    violations are still caught, and is marked parse_failed.
    """
    if not source.strip():
        raise ValueError("cannot lint empty source")
    try:
        tree = ast.parse(source)
    except SyntaxError:
        roots = []
        for match in _IMPORT_LINE.finditer(source):
            roots.append(_root(match.group(1) or match.group(2)))
        disallowed = sorted({r for r in roots if r not in allowlist})
        return LintReport(
            disallowed_imports=tuple(disallowed),
            print_count=source.count("print("),
            has_verification_marker=_has_verification_comment(source),
            parse_failed=True,
        )

    roots = _collect_imports(tree)
    seen = []
    for root in roots:
        if root not in allowlist and root not in seen:
            seen.append(root)

    comprehension_count = sum(1 for node in ast.walk(tree) if isinstance(node, _COMPREHENSIONS))
    print_count = sum(
        1
        for node in ast.walk(tree)
        if isinstance(node, ast.Call)
        and isinstance(node.func, ast.Name)
        and node.func.id == "print"
    )
    has_assert = any(isinstance(node, ast.Assert) for node in ast.walk(tree))

    return LintReport(
        disallowed_imports=tuple(seen),
        comprehension_count=comprehension_count,
        recursion_flags=tuple(_recursion_flags(tree)),
        has_verification_marker=has_assert or _has_verification_comment(source),
        print_count=print_count,
    )


# ---------------------------------------------------------------------------
# Execution backends


class ExecutionBackend(Protocol):
    def run(self, source: str, limits: ExecLimits) -> ExecutionOutput: ...


def source_key(source: str) -> str:
    """Digest used to address scripted outputs for a specific program text."""
    return hashlib.sha256(source.encode("utf-8")).hexdigest()[:16]


class ScriptedRunner:
    """Serves pre-built ExecutionOutputs; counts invocations for assertions.

    Outputs come either from a flat queue (sequential tests) or from a
    mapping keyed by source_key so parallel workers always get the output
    that belongs to their program.
    """

    def __init__(
        self,
        outputs: Optional[Sequence[ExecutionOutput]] = None,
        by_source: Optional[dict[str, Sequence[ExecutionOutput]]] = None,
    ):
        self._queue = list(outputs) if outputs is not None else None
        self._by_source = {k: list(v) for k, v in (by_source or {}).items()}
        self._lock = threading.Lock()
        self.invocations = 0

    def run(self, source: str, limits: ExecLimits) -> ExecutionOutput:
        with self._lock:
            self.invocations += 1
            if self._by_source:
                key = source_key(source)
                queue = self._by_source.get(key)
                if not queue:
                    raise EngineError(f"scripted runner has no output for source key {key}")
                return queue.pop(0)
            if not self._queue:
                raise EngineError("scripted runner exhausted")
            return self._queue.pop(0)


def _truncate(data: bytes, cap: int) -> tuple[bytes, bool]:
    if len(data) <= cap:
        return data, False
    return data[:cap], True


class SubprocessRunner:
    """Runs a program through the runner shim in its own process group.

    Protocol: ``<interpreter> -m runner_shim <source-path>`` with the
    allowlist passed comma-separated via the environment. The parent owns
    timeout enforcement and kills the whole group when it fires.
    """

    def __init__(
        self,
        allowlist: frozenset[str] = DEFAULT_ALLOWLIST,
        shim_cmd: Optional[Sequence[str]] = None,
        interpreter: Optional[str] = None,
    ):
        self.allowlist = allowlist
        if shim_cmd is not None:
            self.shim_cmd = list(shim_cmd)
        else:
            python = interpreter or sys.executable
            self.shim_cmd = [python, "-m", "runner_shim"]
            if interpreter is None and importlib.util.find_spec("runner_shim") is None:
                raise EngineError(
                    "runner shim not importable; install the runner package or pass shim_cmd"
                )

    def run(self, source: str, limits: ExecLimits) -> ExecutionOutput:
        with tempfile.TemporaryDirectory(prefix="iipc-exec-") as tmp:
            path = Path(tmp) / "program.py"
            path.write_text(source, encoding="utf-8")
            env = dict(os.environ)
            env[ALLOWLIST_ENV] = ",".join(sorted(self.allowlist))
            start = time.monotonic()
            try:
                proc = subprocess.Popen(
                    [*self.shim_cmd, str(path)],
                    stdout=subprocess.PIPE,
                    stderr=subprocess.PIPE,
                    cwd=tmp,
                    env=env,
                    start_new_session=True,
                )
            except OSError as exc:
                raise EngineError(f"failed to spawn runner shim: {exc}") from exc
            timed_out = False
            try:
                out, err = proc.communicate(timeout=limits.timeout)
            except subprocess.TimeoutExpired:
                timed_out = True
                try:
                    os.killpg(os.getpgid(proc.pid), signal.SIGKILL)
                except (ProcessLookupError, PermissionError):
                    proc.kill()
                out, err = proc.communicate()
            wall = time.monotonic() - start
            out, out_cut = _truncate(out or b"", limits.max_output_bytes)
            err, err_cut = _truncate(err or b"", limits.max_output_bytes)
            stdout = out.decode("utf-8", errors="replace")
            stderr = err.decode("utf-8", errors="replace")
            if out_cut:
                stdout += "\n[output truncated]"
            if err_cut:
                stderr += "\n[output truncated]"
            return ExecutionOutput(
                stdout=stdout,
                stderr=stderr,
                exit_status=proc.returncode if proc.returncode is not None else -1,
                wall_time=wall,
                timed_out=timed_out,
            )


def disallowed_output(names: Sequence[str]) -> ExecutionOutput:
    """The synthetic error fabricated instead of running tainted source."""
    return ExecutionOutput(
        stdout="",
        stderr=f"disallowed import: {', '.join(names)}",
        exit_status=-1,
        wall_time=0.0,
        timed_out=False,
    )


def execute(
    source: str,
    limits: ExecLimits,
    backend: ExecutionBackend,
    lint_report: LintReport,
) -> ExecutionOutput:
    """Run a linted program, or fabricate an error without spawning.

    Allowlist violations are the only lint findings that block execution;
    style findings (comprehensions, recursion, missing prints) merely feed
    the next refinement prompt.
    """
    if lint_report.disallowed_imports:
        return disallowed_output(lint_report.disallowed_imports)
    return backend.run(source, limits)
