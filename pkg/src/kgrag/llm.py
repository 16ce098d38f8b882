"""LLM backends.

Two implementations share one ``complete(request) -> str`` surface:

``ScriptedLLM``
    Replays canned responses selected by matching the prompt. It is a pure
    function of (script, prompt), which keeps pipeline traces reproducible.
    Scripts are YAML (or JSON) lists of entries::

        - match: substring          # exact | substring | pattern
          text: "In what years did Stan Kasten"
          max_uses: 1               # optional
          response: |
            <entities>
            Stan Kasten
            </entities>

``HttpLLM``
    Sends a generic chat-completion request. Endpoint path, payload keys and
    the location of the reply text can be remapped per provider.
"""

from __future__ import annotations

import datetime as _dt
import enum
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import httpx
import yaml

from .models import TransportError

logger = logging.getLogger(__name__)


class ScriptError(ValueError):
    """A script file is malformed or has overlapping entries."""


class UnscriptedPromptError(LookupError):
    pass


@dataclass(frozen=True)
class LlmRequest:
    prompt: str
    temperature: float = 0.0
    max_tokens: int = 2048
    stop: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("prompt must be non-empty")


@dataclass
class CallRecord:
    index: int
    backend: str
    started: str
    finished: str
    prompt_bytes: int
    response_bytes: int
    ok: bool
    error: str | None = None


class LlmBackend:
    """Base class: subclasses implement ``_complete``; logging happens here."""

    name = "llm"

    def __init__(self) -> None:
        self.call_log: list[CallRecord] = []
        self._log_lock = threading.Lock()

    def _complete(self, request: LlmRequest) -> str:
        raise NotImplementedError

    def complete(self, request: LlmRequest | str) -> str:
        if isinstance(request, str):
            request = LlmRequest(request)
        started = _now()
        response, error = None, None
        try:
            response = self._complete(request)
            return response
        except Exception as exc:
            error = f"{type(exc).__name__}: {exc}"
            raise
        finally:
            with self._log_lock:
                self.call_log.append(
                    CallRecord(
                        index=len(self.call_log),
                        backend=self.name,
                        started=started,
                        finished=_now(),
                        prompt_bytes=len(request.prompt.encode("utf-8")),
                        response_bytes=len(response.encode("utf-8")) if response is not None else 0,
                        ok=error is None,
                        error=error,
                    )
                )


def complete(request: LlmRequest | str, backend: LlmBackend) -> str:
    return backend.complete(request)


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="microseconds")


class Matcher(str, enum.Enum):
    EXACT = "exact"
    SUBSTRING = "substring"
    PATTERN = "pattern"


@dataclass
class ScriptEntry:
    matcher: Matcher
    text: str
    response: str
    max_uses: int | None = None
    uses: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        self.matcher = Matcher(self.matcher)
        if self.max_uses is not None and self.max_uses < 1:
            raise ScriptError("max_uses must be >= 1")
        if self.matcher is Matcher.PATTERN:
            try:
                self._regex = re.compile(self.text, re.MULTILINE)
            except re.error as exc:
                raise ScriptError(f"bad pattern {self.text!r}: {exc}") from None

    @property
    def available(self) -> bool:
        return self.max_uses is None or self.uses < self.max_uses

    def matches(self, prompt: str) -> bool:
        if self.matcher is Matcher.EXACT:
            return prompt == self.text
        if self.matcher is Matcher.SUBSTRING:
            return self.text in prompt
        return self._regex.search(prompt) is not None


def validate_script(entries: Sequence[ScriptEntry]) -> None:
    """Reject entries that provably match a common prompt.

    Exact texts are concrete prompts, so they are checked against every
    other entry. A substring containing another substring always overlaps.
    Overlaps between regexes cannot be decided statically; those surface at
    call time instead.
    """
    for i, a in enumerate(entries):
        for j, b in enumerate(entries):
            if j <= i:
                continue
            clash = False
            if a.matcher is Matcher.EXACT:
                clash = b.matches(a.text)
            elif b.matcher is Matcher.EXACT:
                clash = a.matches(b.text)
            elif a.matcher is Matcher.SUBSTRING and b.matcher is Matcher.SUBSTRING:
                clash = a.text in b.text or b.text in a.text
            elif a.matcher is b.matcher and a.text == b.text:
                clash = True
            if clash:
                raise ScriptError(
                    f"script entries {i} and {j} can match the same prompt "
                    f"({a.matcher.value} {a.text[:40]!r} vs {b.matcher.value} {b.text[:40]!r})"
                )


class ScriptedLLM(LlmBackend):
    name = "scripted"

    def __init__(self, entries: Sequence[ScriptEntry]):
        super().__init__()
        self.entries = list(entries)
        validate_script(self.entries)
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedLLM":
        with open(path, encoding="utf-8") as fh:
            return cls.from_data(yaml.safe_load(fh))

    @classmethod
    def from_data(cls, data: Any) -> "ScriptedLLM":
        if isinstance(data, Mapping):
            data = data.get("entries")
        if not isinstance(data, list):
            raise ScriptError("a script is a list of entries")
        entries = []
        for i, raw in enumerate(data):
            if not isinstance(raw, Mapping) or "response" not in raw:
                raise ScriptError(f"entry {i} needs a response")
            matcher = raw.get("match", "substring")
            text = raw.get("text")
            if not isinstance(text, str) or not text:
                raise ScriptError(f"entry {i} needs non-empty text")
            try:
                entries.append(
                    ScriptEntry(Matcher(matcher), text, str(raw["response"]), raw.get("max_uses"))
                )
            except ValueError as exc:
                raise ScriptError(f"entry {i}: {exc}") from None
        return cls(entries)

    def _complete(self, request: LlmRequest) -> str:
        with self._lock:
            hits = [e for e in self.entries if e.available and e.matches(request.prompt)]
            if not hits:
                raise UnscriptedPromptError(f"unscripted prompt: {request.prompt[:80]!r}")
            if len(hits) > 1:
                raise ScriptError(
                    f"{len(hits)} script entries match prompt {request.prompt[:80]!r}"
                )
            hits[0].uses += 1
            return hits[0].response


@dataclass
class ProviderMapping:
    """Where a provider expects its inputs and puts its output."""

    path: str = "/chat/completions"
    prompt_key: str = "messages"
    response_path: tuple[Any, ...] = ("choices", 0, "message", "content")
    auth_header: str = "Authorization"
    auth_prefix: str = "Bearer "
    as_chat: bool = True


class HttpLLM(LlmBackend):
    name = "http"

    def __init__(
        self,
        base_url: str,
        model: str,
        *,
        api_key_env: str = "KGRAG_API_KEY",
        timeout: float = 60.0,
        retries: int = 2,
        backoff: float = 1.0,
        max_in_flight: int = 4,
        mapping: ProviderMapping | None = None,
        client: httpx.Client | None = None,
    ):
        super().__init__()
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = os.environ.get(api_key_env)
        self.retries = retries
        self.backoff = backoff
        self.mapping = mapping or ProviderMapping()
        self.client = client or httpx.Client(timeout=timeout)
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def payload(self, request: LlmRequest) -> dict[str, Any]:
        m = self.mapping
        body: dict[str, Any] = {
            "model": self.model,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        body[m.prompt_key] = [{"role": "user", "content": request.prompt}] if m.as_chat else request.prompt
        if request.stop:
            body["stop"] = list(request.stop)
        return body

    def extract(self, data: Any) -> str:
        node = data
        for step in self.mapping.response_path:
            try:
                node = node[step]
            except (KeyError, IndexError, TypeError):
                raise TransportError(f"response has no {self.mapping.response_path!r}") from None
        if not isinstance(node, str):
            raise TransportError("response text is not a string")
        return node

    def _complete(self, request: LlmRequest) -> str:
        headers = {}
        if self.api_key:
            headers[self.mapping.auth_header] = self.mapping.auth_prefix + self.api_key
        url = self.base_url + self.mapping.path
        last: Exception | None = None
        with self._slots:
            for attempt in range(self.retries + 1):
                try:
                    resp = self.client.post(url, json=self.payload(request), headers=headers)
                    resp.raise_for_status()
                    return self.extract(resp.json())
                except (httpx.HTTPError, ValueError) as exc:
                    last = exc
                    logger.warning("LLM request failed (attempt %d): %s", attempt + 1, exc)
                    if attempt < self.retries and self.backoff:
                        time.sleep(self.backoff * (attempt + 1))
        raise TransportError(f"LLM request to {url} failed after {self.retries + 1} attempts: {last}")
