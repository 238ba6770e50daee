"""Answer correctness assessment.

A deterministic cascade decides most pairs: canonical string equality,
integer matching for integer-answer datasets, exact comparison of parsed
rational forms, and anchored numeric tolerance. Only pairs the cascade
cannot decide fall through to an LLM judge pinned at temperature 0.
"""

from __future__ import annotations

import logging
import math
import re
import threading
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Optional

from .core import Problem, Verdict, VerifyMethod
from .errors import BackendError
from .llm import Backend, ChatRequest, Message, Role, Tag, complete
from .prompts import TemplateCatalog, default_catalog, render

logger = logging.getLogger(__name__)

# Accepts 4-significant-decimal truncations of the gold value while rejecting
# 2-decimal truncations of thirds; anchored on the gold magnitude.
ABS_TOLERANCE = 1e-6
REL_TOLERANCE = 1e-4


def tolerance_for(gold_value: float) -> float:
    return max(ABS_TOLERANCE, REL_TOLERANCE * abs(gold_value))


@dataclass(frozen=True)
class JudgePolicy:
    integer_mode: bool = False
    use_llm: bool = True


# ---------------------------------------------------------------------------
# Normalization

_SPACING_COMMANDS = ("\\!", "\\,", "\\;", "\\:", "\\left", "\\right")
_THOUSANDS = re.compile(r"(?<=\d),(?=\d{3}(?!\d))")
_DEGREE = re.compile(r"\^\{?\\circ\}?|\u00b0")
_TEXT_BLOCK = re.compile(r"\\(?:text|mbox|mathrm)\{([^{}]*)\}")
_UNIT_WORDS = frozenset(
    {
        "degrees",
        "degree",
        "cm",
        "mm",
        "km",
        "m",
        "meters",
        "inches",
        "inch",
        "feet",
        "foot",
        "units",
        "unit",
        "cents",
        "dollars",
        "hours",
        "minutes",
        "seconds",
        "mph",
        "miles",
        "pounds",
        "grams",
        "percent",
    }
)
_TRAILING_UNIT = re.compile(r"^(.*\d)\s+([A-Za-z ]+)$")


def _strip_outer_dollars(s: str) -> str:
    while len(s) >= 2 and s.startswith("$") and s.endswith("$"):
        s = s[1:-1].strip()
    return s


def _strip_boxed_wrapper(s: str) -> str:
    prefix = "\\boxed{"
    while s.startswith(prefix) and s.endswith("}"):
        inner = s[len(prefix) : -1]
        # Only unwrap when the braces actually balance across the whole body.
        depth = 0
        balanced = True
        for char in inner:
            if char == "{":
                depth += 1
            elif char == "}":
                depth -= 1
                if depth < 0:
                    balanced = False
                    break
        if not balanced or depth != 0:
            break
        s = inner.strip()
    return s


def _split_unit_suffix(s: str) -> tuple[str, str]:
    suffix = ""
    degree_removed = _DEGREE.sub("", s)
    if degree_removed != s:
        suffix = "degrees"
        s = degree_removed.strip()

    def _text_repl(match: re.Match) -> str:
        nonlocal suffix
        word = match.group(1).strip().lower()
        if word and (word in _UNIT_WORDS or word.rstrip("s") in _UNIT_WORDS):
            suffix = (suffix + " " + word).strip()
            return ""
        return match.group(0)

    s = _TEXT_BLOCK.sub(_text_repl, s).strip()

    match = _TRAILING_UNIT.match(s)
    if match:
        words = match.group(2).strip().lower()
        if all(w in _UNIT_WORDS for w in words.split()):
            suffix = (suffix + " " + words).strip()
            s = match.group(1).strip()
    return s, suffix


def normalize(raw: str) -> str:
    """Canonical answer text; idempotent by construction."""
    return _normalize_full(raw)[0]


def _normalize_full(raw: str) -> tuple[str, str]:
    s = raw.strip()
    s = _strip_outer_dollars(s)
    s = _strip_boxed_wrapper(s)
    s = _strip_outer_dollars(s)
    for cmd in _SPACING_COMMANDS:
        s = s.replace(cmd, "")
    s = s.replace("\\$", "")
    s = _THOUSANDS.sub("", s)
    s, suffix = _split_unit_suffix(s)
    s = s.strip()
    # A trailing period is punctuation; a bare trailing decimal point
    # carries no information either.
    if s.endswith("."):
        s = s[:-1].strip()
    s = re.sub(r"[ \t]+", " ", s)
    return s.strip(), suffix


# ---------------------------------------------------------------------------
# Numeric value parsing


class NumberKind(str, Enum):
    INTEGER = "integer"
    RATIONAL = "rational"
    REAL = "real"


@dataclass(frozen=True)
class NumericValue:
    kind: NumberKind
    value: float
    numerator: int = 0
    denominator: int = 1

    @property
    def exact(self) -> bool:
        return self.kind is not NumberKind.REAL

    def as_fraction(self) -> Fraction:
        return Fraction(self.numerator, self.denominator)

    @classmethod
    def integer(cls, n: int) -> "NumericValue":
        return cls(NumberKind.INTEGER, float(n), n, 1)

    @classmethod
    def rational(cls, p: int, q: int) -> "NumericValue":
        frac = Fraction(p, q)  # reduced, q > 0
        if frac.denominator == 1:
            return cls.integer(frac.numerator)
        return cls(NumberKind.RATIONAL, float(frac), frac.numerator, frac.denominator)

    @classmethod
    def real(cls, x: float) -> "NumericValue":
        return cls(NumberKind.REAL, x)


_INT = re.compile(r"^[+-]?\d+$")
_DECIMAL = re.compile(r"^[+-]?(?:\d+\.\d*|\.\d+)$")
_SLASH_FRAC = re.compile(r"^([+-]?\d+)\s*/\s*(\d+)$")
_LATEX_FRAC = re.compile(r"^([+-]?)\\[dt]?frac\{(-?\d+)\}\{(-?\d+)\}$")
_SQRT = re.compile(r"^([+-]?\d*)\\sqrt\{(\d+)\}$")
_PI = re.compile(r"^([+-]?\d*(?:\.\d+)?)\\?pi$")
_FRAC_PI = re.compile(r"^([+-]?)\\[dt]?frac\{(\d*)\\?pi\}\{(\d+)\}$")
_POWER = re.compile(r"^(-?\d+)\^\{?(-?\d+)\}?$")
_SQRT_COMBO = re.compile(r"^([+-]?\d+)\s*([+-])\s*(\d*)\\sqrt\{(\d+)\}$")

_MAX_POWER_EXP = 64
_MAX_POWER_BASE = 10**6


def _coefficient(text: str) -> float:
    if text in ("", "+"):
        return 1.0
    if text == "-":
        return -1.0
    return float(text)


def parse_value(canonical: str) -> Optional[NumericValue]:
    """Parse a canonical answer into a comparable numeric value.

    Structural answers (tuples, intervals, polynomials...) return None and
    rely on canonical string equality upstream.
    """
    s = canonical.strip()
    if not s:
        return None
    if _INT.match(s):
        return NumericValue.integer(int(s))
    if _DECIMAL.match(s):
        return NumericValue.real(float(s))
    match = _SLASH_FRAC.match(s)
    if match:
        return NumericValue.rational(int(match.group(1)), int(match.group(2)))
    match = _LATEX_FRAC.match(s)
    if match:
        sign = -1 if match.group(1) == "-" else 1
        p, q = int(match.group(2)), int(match.group(3))
        if q == 0:
            return None
        return NumericValue.rational(sign * p, q)
    match = _SQRT.match(s)
    if match:
        return NumericValue.real(_coefficient(match.group(1)) * math.sqrt(int(match.group(2))))
    match = _PI.match(s)
    if match:
        return NumericValue.real(_coefficient(match.group(1)) * math.pi)
    match = _FRAC_PI.match(s)
    if match:
        sign = -1 if match.group(1) == "-" else 1
        k = int(match.group(2)) if match.group(2) else 1
        return NumericValue.real(sign * k * math.pi / int(match.group(3)))
    match = _POWER.match(s)
    if match:
        base, exp = int(match.group(1)), int(match.group(2))
        if abs(base) > _MAX_POWER_BASE or abs(exp) > _MAX_POWER_EXP:
            return None
        if exp >= 0:
            return NumericValue.integer(base**exp)
        if base == 0:
            return None
        return NumericValue.rational(1, base**-exp)
    match = _SQRT_COMBO.match(s)
    if match:
        a = float(match.group(1))
        sign = -1.0 if match.group(2) == "-" else 1.0
        k = _coefficient(match.group(3))
        return NumericValue.real(a + sign * k * math.sqrt(int(match.group(4))))
    return None


@dataclass(frozen=True)
class CanonicalAnswer:
    raw: str
    canonical: str
    suffix: str = ""
    value: Optional[NumericValue] = None

    @classmethod
    def from_raw(cls, raw: str) -> "CanonicalAnswer":
        canonical, suffix = _normalize_full(raw)
        return cls(raw=raw, canonical=canonical, suffix=suffix, value=parse_value(canonical))


# ---------------------------------------------------------------------------
# Equivalence cascade


class Outcome(str, Enum):
    EQUAL = "equal"
    NOT_EQUAL = "not-equal"
    UNDECIDED = "undecided"


@dataclass(frozen=True)
class EqualityResult:
    outcome: Outcome
    method: Optional[VerifyMethod] = None
    detail: str = ""


_INT_LIKE = re.compile(r"^[+-]?\d+(?:\.0+)?$")


def _parse_int_like(canonical: str) -> Optional[int]:
    s = canonical.strip()
    if not _INT_LIKE.match(s):
        return None
    return int(float(s)) if "." in s else int(s)


def equal(candidate: CanonicalAnswer, gold: CanonicalAnswer, policy: JudgePolicy) -> EqualityResult:
    """Deterministic equivalence cascade; Undecided defers to the LLM judge.

    The numeric tolerance is anchored on the gold magnitude, so the check is
    deliberately asymmetric in its arguments.
    """
    if candidate.canonical == gold.canonical:
        return EqualityResult(Outcome.EQUAL, VerifyMethod.EXACT_MATCH, "canonical strings equal")

    if policy.integer_mode:
        gold_int = _parse_int_like(gold.canonical)
        if gold_int is not None:
            if not 0 <= gold_int <= 999:
                logger.warning("integer-mode gold %d outside [0, 999]", gold_int)
            cand_int = _parse_int_like(candidate.canonical)
            if cand_int is None:
                return EqualityResult(
                    Outcome.NOT_EQUAL, VerifyMethod.INTEGER_MATCH, "candidate is not an integer"
                )
            if cand_int == gold_int:
                return EqualityResult(Outcome.EQUAL, VerifyMethod.INTEGER_MATCH, f"both equal {gold_int}")
            return EqualityResult(
                Outcome.NOT_EQUAL, VerifyMethod.INTEGER_MATCH, f"{cand_int} != {gold_int}"
            )
        logger.warning("integer-mode gold %r is not an integer", gold.canonical)

    cv, gv = candidate.value, gold.value
    if cv is not None and gv is not None:
        if cv.exact and gv.exact:
            same = cv.as_fraction() == gv.as_fraction()
            return EqualityResult(
                Outcome.EQUAL if same else Outcome.NOT_EQUAL,
                VerifyMethod.SYMBOLIC_NORMALIZATION,
                f"exact forms {'agree' if same else 'disagree'}",
            )
        delta = abs(cv.value - gv.value)
        tol = tolerance_for(gv.value)
        if delta <= tol:
            return EqualityResult(
                Outcome.EQUAL, VerifyMethod.NUMERIC_TOLERANCE, f"|delta|={delta:.3g} <= {tol:.3g}"
            )
        return EqualityResult(
            Outcome.NOT_EQUAL, VerifyMethod.NUMERIC_TOLERANCE, f"|delta|={delta:.3g} > {tol:.3g}"
        )

    return EqualityResult(Outcome.UNDECIDED, None, "structural forms differ")


# ---------------------------------------------------------------------------
# LLM fallback and the full protocol


def judge_llm(
    problem: Problem,
    candidate: str,
    gold: str,
    backend: Backend,
    model: str = "judge",
    catalog: Optional[TemplateCatalog] = None,
) -> bool:
    """Single-token EQUIVALENT/DIFFERENT verdict at temperature 0.

    Anything that is not exactly one of the two tokens counts as DIFFERENT.
    """
    prompt = render(
        "judge", catalog or default_catalog(), problem=problem.statement, candidate=candidate, gold=gold
    )
    request = ChatRequest(
        messages=(Message(Role.USER, prompt),), model=model, tag=Tag.JUDGE, temperature=0.0
    )
    response = complete(backend, request)
    token = response.content.strip().upper().rstrip(".")
    if token == "EQUIVALENT":
        return True
    if token != "DIFFERENT":
        logger.warning("unparseable judge verdict %r treated as DIFFERENT", response.content[:80])
    return False


class JudgeStats:
    """Per-dataset verification-method counters."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.total = 0
        self.by_method: Counter[str] = Counter()
        self.undecided_unjudged = 0

    def record(self, verdict: Verdict, unjudged: bool = False) -> None:
        with self._lock:
            self.total += 1
            self.by_method[verdict.method.value] += 1
            if unjudged:
                self.undecided_unjudged += 1

    def deterministic_count(self) -> int:
        return self.total - self.by_method[VerifyMethod.LLM_JUDGE.value]

    def deterministic_fraction(self) -> float:
        if self.total == 0:
            return 0.0
        return self.deterministic_count() / self.total

    def summary(self) -> dict:
        return {
            "total": self.total,
            "by_method": dict(self.by_method),
            "undecided_unjudged": self.undecided_unjudged,
            "deterministic_fraction": round(100.0 * self.deterministic_fraction(), 1),
        }


def judge(
    problem: Problem,
    candidate_raw: str,
    gold_raw: str,
    policy: JudgePolicy,
    backend: Optional[Backend] = None,
    model: str = "judge",
    stats: Optional[JudgeStats] = None,
    catalog: Optional[TemplateCatalog] = None,
) -> Verdict:
    """Deterministic-first judgment with the LLM strictly as fallback.

    Without a judge backend an undecided pair scores Incorrect and is
    counted separately so either reading of the fallback can be recomputed.
    """
    candidate = CanonicalAnswer.from_raw(candidate_raw)
    gold = CanonicalAnswer.from_raw(gold_raw)
    result = equal(candidate, gold, policy)
    unjudged = False
    if result.outcome is not Outcome.UNDECIDED:
        verdict = Verdict(
            correct=result.outcome is Outcome.EQUAL,
            method=result.method or VerifyMethod.EXACT_MATCH,
            detail=result.detail,
        )
    elif backend is not None and policy.use_llm:
        try:
            equivalent = judge_llm(problem, candidate.canonical, gold.canonical, backend, model, catalog)
            verdict = Verdict(correct=equivalent, method=VerifyMethod.LLM_JUDGE, detail="llm verdict")
        except BackendError as exc:
            logger.warning("judge backend failed (%s); scoring incorrect", exc)
            verdict = Verdict(correct=False, method=VerifyMethod.LLM_JUDGE, detail=f"judge failed: {exc}")
            unjudged = True
    else:
        verdict = Verdict(
            correct=False, method=VerifyMethod.LLM_JUDGE, detail="undecided: no judge available"
        )
        unjudged = True
    if stats is not None:
        stats.record(verdict, unjudged=unjudged)
    return verdict
