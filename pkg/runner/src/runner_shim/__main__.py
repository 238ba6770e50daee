"""CLI entry: ``runner_shim <source-path>`` with IIPC_ALLOWLIST in the env."""

from __future__ import annotations

import os
import sys

from . import ALLOWLIST_ENV, EXIT_SHIM_ERROR, guard_imports, parse_allowlist, run


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print("usage: runner_shim <source-path>", file=sys.stderr)
        return EXIT_SHIM_ERROR
    source_path = argv[0]

    raw = os.environ.get(ALLOWLIST_ENV, "")
    try:
        allowlist = parse_allowlist(raw)
    except ValueError as exc:
        print(f"runner_shim: {ALLOWLIST_ENV}: {exc}", file=sys.stderr)
        return EXIT_SHIM_ERROR

    guard_imports(allowlist, source_path)
    return run(source_path)


if __name__ == "__main__":
    sys.exit(main())
