"""Backend-agnostic chat-completion access.

Three interchangeable backends: a live OpenAI-compatible HTTP client with
retry/backoff, a record/replay cassette pair for deterministic offline runs,
and a scripted backend for tests. All of them satisfy the one-method
``complete(request) -> ChatResponse`` protocol.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence, Union

from .core import TokenUsage
from .errors import BackendError, CassetteMissError

logger = logging.getLogger(__name__)

DEFAULT_API_KEY_ENV = "IIPC_API_KEY"

# Saturation guard for usage accumulation; hitting it only warns.
_USAGE_CAP = 2**63 - 1


class Role(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


class Tag(str, Enum):
    INIT = "init"
    PROG = "prog"
    VAL = "val"
    ERR = "err"
    COT = "cot"
    COMB = "comb"
    JUDGE = "judge"
    VOTE = "vote"


class Finish(str, Enum):
    STOP = "stop"
    LENGTH = "length"
    OTHER = "other"


@dataclass(frozen=True)
class Message:
    role: Role
    content: str


def user(content: str) -> Message:
    return Message(Role.USER, content)


def assistant(content: str) -> Message:
    return Message(Role.ASSISTANT, content)


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    model: str
    tag: Tag
    temperature: float = 0.1
    max_tokens: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        temp = float(self.temperature)
        if not (temp == temp and abs(temp) != float("inf")):
            raise ValueError("temperature must be finite")
        if temp < 0:
            raise ValueError("temperature must be >= 0")
        if self.tag is Tag.JUDGE and temp != 0.0:
            raise ValueError("judge requests must use temperature 0")


@dataclass(frozen=True)
class ChatResponse:
    content: str
    usage: TokenUsage = field(default_factory=TokenUsage)
    finish: Finish = Finish.STOP


class Backend(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse: ...


def accumulate(total: TokenUsage, delta: TokenUsage) -> TokenUsage:
    """Fieldwise sum, saturating at the cap with a warning."""
    prompt = total.prompt_tokens + delta.prompt_tokens
    completion = total.completion_tokens + delta.completion_tokens
    if prompt > _USAGE_CAP or completion > _USAGE_CAP:
        logger.warning("token usage accumulator saturated")
        prompt = min(prompt, _USAGE_CAP)
        completion = min(completion, _USAGE_CAP)
    return TokenUsage(prompt_tokens=prompt, completion_tokens=completion)


class UsageMeter:
    """Thread-safe token accumulator shared across a run."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._total = TokenUsage()

    def add(self, delta: TokenUsage) -> None:
        with self._lock:
            self._total = accumulate(self._total, delta)

    @property
    def total(self) -> TokenUsage:
        with self._lock:
            return self._total


def request_payload(request: ChatRequest) -> dict:
    payload = {
        "model": request.model,
        "messages": [{"role": m.role.value, "content": m.content} for m in request.messages],
        "temperature": request.temperature,
    }
    if request.max_tokens is not None:
        payload["max_tokens"] = request.max_tokens
    return payload


def cassette_key(request: ChatRequest) -> str:
    """Stable digest over a canonical request serialization.

    Field order and message construction details never change the digest;
    whitespace inside message content always does.
    """
    canonical = {
        "model": request.model,
        "temperature": float(request.temperature),
        "max_tokens": request.max_tokens,
        "tag": request.tag.value,
        "messages": [{"role": m.role.value, "content": m.content} for m in request.messages],
    }
    blob = json.dumps(canonical, sort_keys=True, ensure_ascii=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def complete(
    backend: Backend, request: ChatRequest, meter: Optional[UsageMeter] = None
) -> ChatResponse:
    """Run one exchange and fold its usage into the caller's accumulator."""
    response = backend.complete(request)
    if meter is not None:
        meter.add(response.usage)
    return response


# ---------------------------------------------------------------------------
# Cassette (record / replay)


@dataclass
class CassetteEntry:
    request: dict
    responses: list[ChatResponse] = field(default_factory=list)
    tag: str = ""


class Cassette:
    """Recorded request/response map, keyed by request digest.

    Repeated identical requests store an ordered list of responses so that
    deliberate re-asks (voting) replay distinct answers in order. Auth
    material is never written: only the JSON request body is kept.
    """

    def __init__(self, entries: Optional[dict[str, CassetteEntry]] = None):
        self.entries: dict[str, CassetteEntry] = entries or {}

    def record(self, request: ChatRequest, response: ChatResponse) -> str:
        digest = cassette_key(request)
        entry = self.entries.get(digest)
        if entry is None:
            entry = CassetteEntry(request=request_payload(request), tag=request.tag.value)
            self.entries[digest] = entry
        entry.responses.append(response)
        return digest

    def save(self, path: Union[str, Path]) -> None:
        payload = {
            "version": 1,
            "entries": {
                digest: {
                    "tag": entry.tag,
                    "request": entry.request,
                    "responses": [
                        {
                            "content": resp.content,
                            "prompt_tokens": resp.usage.prompt_tokens,
                            "completion_tokens": resp.usage.completion_tokens,
                            "finish": resp.finish.value,
                        }
                        for resp in entry.responses
                    ],
                }
                for digest, entry in self.entries.items()
            },
        }
        text = json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False)
        Path(path).write_text(text + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Cassette":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        entries = {}
        for digest, raw in payload.get("entries", {}).items():
            entries[digest] = CassetteEntry(
                request=raw.get("request", {}),
                tag=raw.get("tag", ""),
                responses=[
                    ChatResponse(
                        content=resp["content"],
                        usage=TokenUsage(
                            prompt_tokens=resp.get("prompt_tokens", 0),
                            completion_tokens=resp.get("completion_tokens", 0),
                        ),
                        finish=Finish(resp.get("finish", "stop")),
                    )
                    for resp in raw.get("responses", ())
                ],
            )
        return cls(entries)

    def requests_by_tag(self, tag: Tag) -> list[dict]:
        return [e.request for e in self.entries.values() if e.tag == tag.value]


class ReplayBackend:
    """Serves recorded responses; never mutates the cassette, never networks."""

    def __init__(self, cassette: Cassette):
        self._cassette = cassette
        self._cursors: dict[str, int] = {}
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        digest = cassette_key(request)
        entry = self._cassette.entries.get(digest)
        with self._lock:
            cursor = self._cursors.get(digest, 0)
            if entry is None:
                raise CassetteMissError(
                    f"no recording for digest {digest} (tag {request.tag.value})"
                )
            if cursor >= len(entry.responses):
                raise CassetteMissError(
                    f"recordings exhausted for digest {digest} (tag {request.tag.value})"
                )
            self._cursors[digest] = cursor + 1
        return entry.responses[cursor]


class RecordingBackend:
    """Pass-through wrapper that appends every exchange to a cassette."""

    def __init__(
        self,
        inner: Backend,
        cassette: Optional[Cassette] = None,
        path: Optional[Union[str, Path]] = None,
        autosave: bool = True,
    ):
        self.inner = inner
        self.cassette = cassette or Cassette()
        self.path = Path(path) if path else None
        self.autosave = autosave
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        response = self.inner.complete(request)
        with self._lock:
            self.cassette.record(request, response)
            if self.autosave and self.path is not None:
                self.cassette.save(self.path)
        return response

    def save(self) -> None:
        if self.path is None:
            raise ValueError("recording backend has no cassette path")
        with self._lock:
            self.cassette.save(self.path)


# ---------------------------------------------------------------------------
# Scripted backend (tests and fixtures)

ScriptItem = Union[str, ChatResponse, Exception]


def _synthetic_usage(request: ChatRequest, content: str) -> TokenUsage:
    prompt = sum(len(m.content) for m in request.messages) // 4 + 1
    return TokenUsage(prompt_tokens=prompt, completion_tokens=len(content) // 4 + 1)


class ScriptedBackend:
    """Returns queued or computed responses; issues zero network operations.

    Responses can be a flat list consumed in order, a per-tag mapping of
    queues, or a handler callable. Exceptions queued as items are raised.
    """

    def __init__(
        self,
        script: Optional[Sequence[ScriptItem]] = None,
        by_tag: Optional[dict[Tag, Sequence[ScriptItem]]] = None,
        handler: Optional[Callable[[ChatRequest], ScriptItem]] = None,
    ):
        self._script = list(script) if script is not None else None
        self._by_tag = {tag: list(items) for tag, items in (by_tag or {}).items()}
        self._handler = handler
        self._lock = threading.Lock()
        self.requests: list[ChatRequest] = []

    def calls_for(self, tag: Tag) -> int:
        return sum(1 for req in self.requests if req.tag is tag)

    def _next_item(self, request: ChatRequest) -> ScriptItem:
        if self._handler is not None:
            return self._handler(request)
        if self._by_tag:
            queue = self._by_tag.get(request.tag)
            if not queue:
                raise BackendError(f"scripted backend has no response for tag {request.tag.value}")
            return queue.pop(0)
        if not self._script:
            raise BackendError("scripted backend exhausted")
        return self._script.pop(0)

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.requests.append(request)
            item = self._next_item(request)
        if isinstance(item, Exception):
            raise item
        if isinstance(item, ChatResponse):
            return item
        return ChatResponse(content=item, usage=_synthetic_usage(request, item))


# ---------------------------------------------------------------------------
# Live HTTP backend (OpenAI-compatible chat completions)

_RETRYABLE_STATUSES = {429, 500, 502, 503, 504}


class HttpBackend:
    """OpenAI-compatible chat-completions client with exponential backoff.

    Credentials are read from the configured environment variable at call
    time and sent only as a header, so they can never leak into cassettes.
    """

    def __init__(
        self,
        base_url: str,
        api_key_env: str = DEFAULT_API_KEY_ENV,
        timeout: float = 120.0,
        max_attempts: int = 5,
        base_delay: float = 1.0,
        session=None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.base_delay = base_delay
        self._session = session
        self._sleep = sleep
        self.network_ops = 0

    def _ensure_session(self):
        if self._session is None:
            import requests

            self._session = requests.Session()
        return self._session

    def complete(self, request: ChatRequest) -> ChatResponse:
        key = os.environ.get(self.api_key_env)
        if not key:
            raise BackendError(f"live backend needs {self.api_key_env} in the environment")
        session = self._ensure_session()
        url = f"{self.base_url}/chat/completions"
        headers = {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}
        payload = request_payload(request)

        import requests

        last_error = "no attempt made"
        for attempt in range(self.max_attempts):
            if attempt > 0:
                self._sleep(self.base_delay * 2 ** (attempt - 1))
            self.network_ops += 1
            try:
                resp = session.post(url, json=payload, headers=headers, timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = f"transport failure: {exc}"
                logger.warning("%s (attempt %d)", last_error, attempt + 1)
                continue
            if resp.status_code in _RETRYABLE_STATUSES:
                last_error = f"retryable status {resp.status_code}"
                logger.warning("%s (attempt %d)", last_error, attempt + 1)
                continue
            if resp.status_code != 200:
                raise BackendError(
                    f"chat completion failed with status {resp.status_code}: {resp.text[:300]}"
                )
            return self._parse(resp.json())
        raise BackendError(f"chat completion gave up after {self.max_attempts} attempts: {last_error}")

    @staticmethod
    def _parse(payload: dict) -> ChatResponse:
        try:
            choice = payload["choices"][0]
            content = choice["message"].get("content") or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion payload: {exc}") from exc
        finish_raw = choice.get("finish_reason")
        finish = {"stop": Finish.STOP, "length": Finish.LENGTH}.get(finish_raw, Finish.OTHER)
        usage = payload.get("usage") or {}
        return ChatResponse(
            content=content,
            usage=TokenUsage(
                prompt_tokens=int(usage.get("prompt_tokens", 0) or 0),
                completion_tokens=int(usage.get("completion_tokens", 0) or 0),
            ),
            finish=finish,
        )
