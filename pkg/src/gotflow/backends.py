"""LLM backends: scripted mock, cassette recorder/replayer and an HTTP client
for OpenAI-compatible chat-completions endpoints."""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol

import httpx

from .errors import BackendError

DEFAULT_MODEL = "gpt-4o-mini"


@dataclass(frozen=True)
class GenerationSettings:
    model: str = DEFAULT_MODEL
    temperature: float = 0.0
    max_tokens: int = 1024
    timeout: float = 60.0

    def __post_init__(self) -> None:
        if not 0 <= self.temperature <= 2:
            raise ValueError(f"temperature must be in [0, 2], got {self.temperature}")
        if not isinstance(self.max_tokens, int) or self.max_tokens <= 0:
            raise ValueError(f"max_tokens must be a positive integer, got {self.max_tokens}")
        if self.timeout <= 0:
            raise ValueError(f"timeout must be positive, got {self.timeout}")


class LLMBackend(Protocol):
    def complete(self, prompt: str, settings: GenerationSettings, *, node_id: str | None = None) -> str: ...


def prompt_sha256(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def _check_prompt(prompt: str) -> None:
    if not prompt:
        raise ValueError("prompt must not be empty")


# --------------------------------------------------------------------------- mock


@dataclass(frozen=True)
class MockRule:
    response: str
    node_id: str | None = None
    prompt_substring: str | None = None

    def matches(self, prompt: str, node_id: str | None) -> bool:
        if self.node_id is not None:
            return node_id == self.node_id
        return self.prompt_substring is not None and self.prompt_substring in prompt


@dataclass(frozen=True)
class MockScript:
    rules: tuple[MockRule, ...] = ()
    default_response: str | None = None

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, str]) -> "MockScript":
        """Build from a ``{node_id: response}`` object; key ``"*"`` is the default."""
        rules = []
        default = None
        for key, value in mapping.items():
            if not isinstance(value, str):
                raise ValueError(f"mock response for {key!r} must be a string")
            if key == "*":
                default = value
            else:
                rules.append(MockRule(value, node_id=key))
        return cls(tuple(rules), default)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MockScript":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise ValueError("mock script must be a JSON object mapping node ids to responses")
        return cls.from_mapping(data)


class MockBackend:
    """Deterministic backend driven by a :class:`MockScript`; first matching rule wins."""

    def __init__(self, script: MockScript) -> None:
        self.script = script

    def complete(self, prompt: str, settings: GenerationSettings, *, node_id: str | None = None) -> str:
        _check_prompt(prompt)
        for rule in self.script.rules:
            if rule.matches(prompt, node_id):
                return rule.response
        if self.script.default_response is not None:
            return self.script.default_response
        raise BackendError("no_rule_matched", f"no mock rule for node {node_id!r}")


# --------------------------------------------------------------------------- cassettes


@dataclass
class CassetteEntry:
    node_id: str | None
    prompt_sha256: str
    prompt: str
    response: str | None
    settings: dict[str, Any] = field(default_factory=dict)
    error: dict[str, Any] | None = None

    def to_json(self) -> str:
        record: dict[str, Any] = {
            "node_id": self.node_id,
            "prompt_sha256": self.prompt_sha256,
            "prompt": self.prompt,
            "response": self.response,
            "settings": self.settings,
        }
        if self.error is not None:
            record["error"] = self.error
        return json.dumps(record, ensure_ascii=False)

    @classmethod
    def from_dict(cls, record: Mapping[str, Any]) -> "CassetteEntry":
        return cls(
            record.get("node_id"),
            record["prompt_sha256"],
            record["prompt"],
            record.get("response"),
            dict(record.get("settings") or {}),
            record.get("error"),
        )


def read_cassette(path: str | os.PathLike) -> list[CassetteEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                entries.append(CassetteEntry.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad cassette record ({exc})") from None
    return entries


def write_cassette(path: str | os.PathLike, entries: Iterable[CassetteEntry]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for entry in entries:
            fh.write(entry.to_json() + "\n")


class RecordingBackend:
    """Pass calls through to ``inner`` and append each exchange to a cassette file."""

    def __init__(self, inner: LLMBackend, path: str | os.PathLike) -> None:
        self.inner = inner
        self.path = Path(path)
        self._lock = threading.Lock()

    def _append(self, entry: CassetteEntry) -> None:
        with self._lock, open(self.path, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(entry.to_json() + "\n")

    def complete(self, prompt: str, settings: GenerationSettings, *, node_id: str | None = None) -> str:
        digest = prompt_sha256(prompt)
        try:
            response = self.inner.complete(prompt, settings, node_id=node_id)
        except BackendError as exc:
            error = {"kind": exc.kind, "message": exc.message, "status_code": exc.status_code}
            self._append(CassetteEntry(node_id, digest, prompt, None, asdict(settings), error))
            raise
        self._append(CassetteEntry(node_id, digest, prompt, response, asdict(settings)))
        return response


def record_and_wrap(inner: LLMBackend, cassette_path: str | os.PathLike) -> RecordingBackend:
    return RecordingBackend(inner, cassette_path)


class ReplayBackend:
    """Answer from recorded exchanges keyed by (node id, prompt digest).

    Repeated prompts are answered in recording order; once a key's records are
    used up its last record keeps answering.
    """

    def __init__(self, entries: Iterable[CassetteEntry]) -> None:
        self._records: dict[tuple[str | None, str], list[CassetteEntry]] = {}
        for entry in entries:
            self._records.setdefault((entry.node_id, entry.prompt_sha256), []).append(entry)
        self._cursor: dict[tuple[str | None, str], int] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "ReplayBackend":
        return cls(read_cassette(path))

    def complete(self, prompt: str, settings: GenerationSettings, *, node_id: str | None = None) -> str:
        _check_prompt(prompt)
        key = (node_id, prompt_sha256(prompt))
        with self._lock:
            records = self._records.get(key)
            if not records:
                raise BackendError("no_rule_matched", f"no recorded response for node {node_id!r} with prompt sha256 {key[1][:12]}")
            i = self._cursor.get(key, 0)
            self._cursor[key] = i + 1
            entry = records[min(i, len(records) - 1)]
        if entry.error is not None:
            raise BackendError(entry.error["kind"], entry.error.get("message", ""), entry.error.get("status_code"))
        return entry.response


# --------------------------------------------------------------------------- HTTP


class OpenAICompatBackend:
    """POST ``{base_url}/chat/completions`` with a single user message.

    Timeouts, 429 and 5xx responses are retried up to ``max_retries`` times
    with exponential backoff; everything else fails immediately.
    """

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        *,
        max_retries: int = 3,
        backoff: float = 0.5,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        base_url = base_url or os.environ.get("GF_API_BASE")
        if not base_url:
            raise ValueError("no API base URL: pass base_url or set GF_API_BASE")
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get("GF_API_KEY")
        self.max_retries = max_retries
        self.backoff = backoff
        self.client = client or httpx.Client()
        self.sleep = sleep

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def _once(self, prompt: str, settings: GenerationSettings) -> str:
        payload = {
            "model": settings.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": settings.temperature,
            "max_tokens": settings.max_tokens,
        }
        try:
            resp = self.client.post(
                f"{self.base_url}/chat/completions",
                json=payload,
                headers=self._headers(),
                timeout=settings.timeout,
            )
        except httpx.TimeoutException as exc:
            raise BackendError("timeout", str(exc) or "request timed out") from exc
        except httpx.TransportError as exc:
            raise BackendError("http_status", f"connection failed: {exc}") from exc
        if resp.status_code == 429:
            raise BackendError("rate_limited", resp.text[:200], 429)
        if resp.status_code >= 400:
            raise BackendError("http_status", resp.text[:200], resp.status_code)
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError("malformed_response", f"unexpected response body: {exc!r}") from None
        if not isinstance(content, str):
            raise BackendError("malformed_response", "message content is not a string")
        return content

    @staticmethod
    def _transient(exc: BackendError) -> bool:
        if exc.kind in ("timeout", "rate_limited"):
            return True
        return exc.kind == "http_status" and (exc.status_code is None or exc.status_code >= 500)

    def complete(self, prompt: str, settings: GenerationSettings, *, node_id: str | None = None) -> str:
        _check_prompt(prompt)
        attempt = 0
        while True:
            try:
                return self._once(prompt, settings)
            except BackendError as exc:
                if attempt >= self.max_retries or not self._transient(exc):
                    raise
                self.sleep(self.backoff * 2**attempt)
                attempt += 1
