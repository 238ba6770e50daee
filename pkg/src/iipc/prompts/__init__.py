"""Prompt template rendering and model-response parsing.

Templates are plain-text files with ``{placeholder}`` slots; the bundled
catalog can be swapped for any directory with the same file names. Parsing
helpers are pure functions and never raise on malformed text unless the
contract says so.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Union

from ..core import ErrorDescriptor, PropositionSet
from ..errors import ResponseFormatError, TemplateError

logger = logging.getLogger(__name__)

STOP_SENTINEL = "SOLUTION_SATISFACTORY"

EMPTY_MEMORY_TEXT = "none"

# Documented placeholder sets; render() enforces exact agreement and the
# introspection test keeps the catalog files honest.
TEMPLATE_PLACEHOLDERS: dict[str, frozenset[str]] = {
    "init": frozenset({"problem"}),
    "prog": frozenset({"problem", "propositions"}),
    "val": frozenset({"problem", "propositions", "program", "output", "memory"}),
    "err": frozenset({"problem", "propositions", "program", "output", "memory"}),
    "cot": frozenset({"problem", "propositions"}),
    "comb": frozenset(
        {"problem", "propositions", "program", "program_output", "cot"}
    ),
    "comb_program_only": frozenset(
        {"problem", "propositions", "program", "program_output"}
    ),
    "judge": frozenset({"problem", "candidate", "gold"}),
}

_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")


class TemplateCatalog:
    """Loaded template texts, one per tag."""

    def __init__(self, templates: dict[str, str]):
        missing = set(TEMPLATE_PLACEHOLDERS) - set(templates)
        if missing:
            raise TemplateError(f"catalog missing templates: {', '.join(sorted(missing))}")
        self.templates = dict(templates)

    @classmethod
    def load(cls, path: Optional[Union[str, Path]] = None) -> "TemplateCatalog":
        templates = {}
        if path is None:
            base = resources.files(__package__) / "catalog"
            for tag in TEMPLATE_PLACEHOLDERS:
                templates[tag] = (base / f"{tag}.txt").read_text(encoding="utf-8")
        else:
            base_path = Path(path)
            for tag in TEMPLATE_PLACEHOLDERS:
                templates[tag] = (base_path / f"{tag}.txt").read_text(encoding="utf-8")
        return cls(templates)

    def placeholders(self, tag: str) -> frozenset[str]:
        return frozenset(_PLACEHOLDER.findall(self.templates[tag]))


_default_catalog: Optional[TemplateCatalog] = None


def default_catalog() -> TemplateCatalog:
    global _default_catalog
    if _default_catalog is None:
        _default_catalog = TemplateCatalog.load()
    return _default_catalog


def format_memory(descriptors: Iterable[Union[ErrorDescriptor, str]]) -> str:
    """Numbered list of reflection texts; an empty memory renders as "none"."""
    lines = []
    for i, item in enumerate(descriptors, start=1):
        text = item.text if isinstance(item, ErrorDescriptor) else str(item)
        lines.append(f"{i}. {text}")
    return "\n".join(lines) if lines else EMPTY_MEMORY_TEXT


def format_items(items: Iterable[str]) -> str:
    lines = [f"{i}. {item}" for i, item in enumerate(items, start=1)]
    return "\n".join(lines) if lines else EMPTY_MEMORY_TEXT


def _coerce(name: str, value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, PropositionSet):
        return format_items(value.items)
    if name == "memory":
        return format_memory(value)
    if isinstance(value, (list, tuple)):
        return format_items([str(v) for v in value])
    return str(value)


def render(tag: str, catalog: Optional[TemplateCatalog] = None, **context) -> str:
    """Fill a template; refuses both missing and unexpected placeholders."""
    catalog = catalog or default_catalog()
    if tag not in catalog.templates:
        raise TemplateError(f"unknown template tag: {tag}")
    needed = catalog.placeholders(tag)
    supplied = set(context)
    missing = needed - supplied
    if missing:
        raise TemplateError(f"missing placeholder: {', '.join(sorted(missing))}")
    extra = supplied - needed
    if extra:
        raise TemplateError(f"unexpected placeholder: {', '.join(sorted(extra))}")

    values = {name: _coerce(name, value) for name, value in context.items()}
    return _PLACEHOLDER.sub(lambda m: values[m.group(1)], catalog.templates[tag])


# ---------------------------------------------------------------------------
# Response parsing

_FENCE = re.compile(r"```[^\n]*\n(.*?)(?:\n)?```", re.DOTALL)


def extract_code(response: str) -> Optional[str]:
    """Body of the last fenced code block, or None when there is none.

    Models often echo the previous program before the revision; by
    convention the revision comes last.
    """
    blocks = _FENCE.findall(response)
    if not blocks:
        return None
    return blocks[-1]


def strip_code_blocks(response: str) -> str:
    return _FENCE.sub("", response)


@dataclass(frozen=True)
class ValOutcome:
    stop: bool
    source: Optional[str] = None
    reflection: Optional[str] = None


def parse_validation(response: str) -> ValOutcome:
    """Stop sentinel or a revision (code block plus surrounding reflection).

    Raises ResponseFormatError when the response is neither, which the engine
    books as a format failure against the active budget.
    """
    first_line = next((ln for ln in response.splitlines() if ln.strip()), "")
    if first_line.strip() == STOP_SENTINEL:
        return ValOutcome(stop=True)
    source = extract_code(response)
    if source is None or not source.strip():
        raise ResponseFormatError("revision response carries no fenced code block")
    reflection = strip_code_blocks(response).strip()
    if not reflection:
        reflection = "(no reflection provided)"
    return ValOutcome(stop=False, source=source, reflection=reflection)


_LIST_ITEM = re.compile(r"^\s*(?:\d+[.)]\s*|[-*•]\s+)(.*\S)\s*$")

NO_PROPOSITIONS_TEXT = "(model returned no propositions)"


def parse_propositions(response: str) -> PropositionSet:
    """One proposition per numbered or bulleted line, markers stripped.

    When no list structure is found the whole trimmed response becomes a
    single proposition, with a warning.
    """
    items = []
    for line in response.splitlines():
        match = _LIST_ITEM.match(line)
        if match:
            items.append(match.group(1))
    if not items:
        logger.warning("no list structure in propositions response; using degenerate fallback")
        body = response.strip()
        items = [body] if body else [NO_PROPOSITIONS_TEXT]
    return PropositionSet(tuple(items))


_BOXED = "\\boxed{"
_FINAL_ANSWER = re.compile(r"final answer is", re.IGNORECASE)


def _balanced_braces(text: str, start: int) -> str:
    """Content from ``start`` to the matching close brace; best-effort at EOF."""
    depth = 1
    for i in range(start, len(text)):
        char = text[i]
        if char == "{":
            depth += 1
        elif char == "}":
            depth -= 1
            if depth == 0:
                return text[start:i]
    return text[start:]


def _trim_answer(tail: str) -> str:
    tail = tail.strip()
    tail = tail.lstrip(":").strip()
    tail = tail.strip("$").strip()
    tail = tail.rstrip(".").strip()
    return tail


def extract_boxed(text: str) -> str:
    """Final-answer extraction with a fixed precedence.

    1. content of the last ``\\boxed{...}`` (balanced braces, nesting kept);
    2. the text after the last case-insensitive "final answer is", to end of
       line, punctuation-trimmed;
    3. the last non-blank line.
    """
    idx = text.rfind(_BOXED)
    if idx != -1:
        return _balanced_braces(text, idx + len(_BOXED))
    matches = list(_FINAL_ANSWER.finditer(text))
    if matches:
        tail = text[matches[-1].end() :]
        line = tail.splitlines()[0] if tail.splitlines() else ""
        trimmed = _trim_answer(line)
        if trimmed:
            return trimmed
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    return lines[-1] if lines else ""
