"""Execution shim: run one program under a user-frame import allowlist.

The guard applies only to import statements issued by the program being run;
allowlisted libraries keep their full transitive import freedom. Results are
reported purely through stdout, stderr, and the exit code: 0 for a clean run,
1 for an uncaught exception in the program, 2 for shim-level problems such as
an unreadable source file. The shim itself writes nothing to stdout.

Timeouts, output caps, and any stronger isolation are the parent process's
job. This is not a defense against deliberately hostile code.
"""

from __future__ import annotations

import builtins
import sys
import traceback

ALLOWLIST_ENV = "IIPC_ALLOWLIST"

EXIT_OK = 0
EXIT_PROGRAM_ERROR = 1
EXIT_SHIM_ERROR = 2


def parse_allowlist(raw: str) -> frozenset[str]:
    names = frozenset(item.strip() for item in raw.split(",") if item.strip())
    if not names:
        raise ValueError("allowlist must name at least one module")
    return names


def guard_imports(allowlist: frozenset[str], user_file: str) -> None:
    """Replace __import__ with a version that polices only the user frame.

    The importing module's globals identify the caller: an import whose
    __file__ is the user program gets checked against the allowlist; imports
    issued from inside library code pass through untouched.
    """
    real_import = builtins.__import__

    def guarded(name, globals=None, locals=None, fromlist=(), level=0):
        caller_globals = globals if globals is not None else {}
        if caller_globals.get("__file__") == user_file and level == 0:
            root = name.split(".")[0]
            if root not in allowlist:
                raise ImportError(f"module not allowlisted: {root}")
        return real_import(name, globals, locals, fromlist, level)

    builtins.__import__ = guarded


def run(source_path: str) -> int:
    """Execute the program at ``source_path`` as a fresh main module."""
    try:
        with open(source_path, "r", encoding="utf-8") as handle:
            source = handle.read()
    except OSError as exc:
        print(f"runner_shim: cannot read {source_path}: {exc}", file=sys.stderr)
        return EXIT_SHIM_ERROR

    program_globals = {
        "__name__": "__main__",
        "__file__": source_path,
        "__builtins__": builtins,
    }
    try:
        code = compile(source, source_path, "exec")
        exec(code, program_globals)
    except SystemExit as exc:
        code = exc.code
        if code is None:
            return EXIT_OK
        return code if isinstance(code, int) else EXIT_PROGRAM_ERROR
    except BaseException:
        # Full traceback, minus the shim's own exec frame.
        exc_type, exc_value, tb = sys.exc_info()
        if tb is not None and tb.tb_next is not None:
            tb = tb.tb_next
        traceback.print_exception(exc_type, exc_value, tb, file=sys.stderr)
        return EXIT_PROGRAM_ERROR
    return EXIT_OK
