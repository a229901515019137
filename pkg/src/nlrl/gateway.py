"""OpenAI-compatible chat-completions client with a hash-keyed transcript cache.

Every exchange is stored as one JSON line in ``transcripts.jsonl`` under the
cache directory. The cache key covers model, temperature, messages and
response format only, so identical prompts issued from different places in a
sweep share one entry.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from collections.abc import Callable, Iterator
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import httpx

from .errors import PersistenceCorrupt, ReplayMiss, UpstreamUnavailable, UsageError

log = logging.getLogger(__name__)

TRANSCRIPTS_FILE = "transcripts.jsonl"
API_KEY_ENV = "OPENAI_API_KEY"
BASE_URL_ENV = "OPENAI_BASE_URL"
ORG_ENV = "OPENAI_ORG_ID"
DEFAULT_BASE_URL = "https://api.openai.com/v1"

MAX_ATTEMPTS = 5
BACKOFF_BASE = 1.0
BACKOFF_FACTOR = 2.0
RETRY_STATUSES = frozenset({408, 429, 500, 502, 503, 504})

CACHE_MODES = ("live", "cache_first", "replay_only")


@dataclass(frozen=True)
class ChatRequest:
    model: str
    temperature: float
    messages: tuple[tuple[str, str], ...]
    response_format: str = "text"
    request_tag: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple((str(r), str(c)) for r, c in self.messages))
        if not self.messages:
            raise UsageError("a chat request needs at least one message")
        roles = [r for r, _ in self.messages]
        if any(r not in ("system", "user") for r in roles):
            raise UsageError(f"unsupported roles {roles}")
        if "system" in roles and roles[0] != "system":
            raise UsageError("the system message must come first")
        if self.temperature < 0:
            raise UsageError("temperature must be non-negative")
        if self.response_format not in ("text", "json_object"):
            raise UsageError(f"unknown response format {self.response_format!r}")

    def canonical(self) -> bytes:
        doc = {
            "messages": [[r, c] for r, c in self.messages],
            "model": self.model,
            "response_format": self.response_format,
            "temperature": f"{self.temperature:.6f}",
        }
        return json.dumps(doc, sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode("utf-8")

    def prompt_hash(self) -> str:
        return hashlib.sha256(self.canonical()).hexdigest()

    def to_json(self) -> dict[str, Any]:
        return {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": r, "content": c} for r, c in self.messages],
            "response_format": self.response_format,
            "request_tag": self.request_tag,
        }

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> ChatRequest:
        return cls(
            model=doc["model"],
            temperature=float(doc["temperature"]),
            messages=tuple((m["role"], m["content"]) for m in doc["messages"]),
            response_format=doc.get("response_format", "text"),
            request_tag=doc.get("request_tag", ""),
        )


@dataclass(frozen=True)
class TranscriptEntry:
    prompt_hash: str
    request: ChatRequest
    response_text: str
    latency_ms: int = 0
    attempt: int = 1
    timestamp: str = ""
    usage: dict | None = None

    def to_json(self) -> dict[str, Any]:
        doc = asdict(self)
        doc["request"] = self.request.to_json()
        if self.usage is None:
            doc.pop("usage")
        return doc

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> TranscriptEntry:
        return cls(
            prompt_hash=doc["prompt_hash"],
            request=ChatRequest.from_json(doc["request"]),
            response_text=doc["response_text"],
            latency_ms=int(doc.get("latency_ms", 0)),
            attempt=int(doc.get("attempt", 1)),
            timestamp=doc.get("timestamp", ""),
            usage=doc.get("usage"),
        )


@dataclass(frozen=True)
class CachePolicy:
    mode: str = "cache_first"
    cache_dir: Path | None = None

    def __post_init__(self) -> None:
        if self.mode not in CACHE_MODES:
            raise UsageError(f"unknown cache mode {self.mode!r}; expected one of {CACHE_MODES}")
        if self.cache_dir is not None:
            object.__setattr__(self, "cache_dir", Path(self.cache_dir))
        if self.mode != "live" and self.cache_dir is None:
            raise UsageError(f"cache mode {self.mode!r} needs a cache directory")


def persist_transcript(entry: TranscriptEntry, directory: str | Path) -> None:
    path = Path(directory) / TRANSCRIPTS_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry.to_json(), ensure_ascii=False) + "\n")


def load_transcripts(directory: str | Path, lenient: bool = False) -> Iterator[TranscriptEntry]:
    """Yield stored entries in file order.

    Corrupt lines raise :class:`PersistenceCorrupt` unless ``lenient`` is set,
    in which case they are logged with their line number and skipped.
    """
    path = Path(directory) / TRANSCRIPTS_FILE
    if not path.exists():
        return
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                entry = TranscriptEntry.from_json(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, UsageError) as exc:
                if not lenient:
                    raise PersistenceCorrupt(path, lineno, type(exc).__name__) from exc
                log.warning("%s:%d: skipping corrupt transcript line", path, lineno)
                continue
            yield entry


@dataclass
class ChatGateway:
    """Chat client honouring a :class:`CachePolicy`.

    ``transport`` and ``sleep`` exist for tests; by default requests go over
    the network and backoff really sleeps.
    """

    policy: CachePolicy
    base_url: str | None = None
    api_key: str | None = None
    organization: str | None = None
    max_tokens: int | None = None
    timeout: float = 120.0
    transport: httpx.BaseTransport | None = None
    sleep: Callable[[float], None] = time.sleep
    network_calls: int = 0
    used: list = field(default_factory=list)

    def __post_init__(self) -> None:
        self._lock = threading.Lock()
        self._cache: dict[str, TranscriptEntry] = {}
        if self.policy.cache_dir is not None:
            for entry in load_transcripts(self.policy.cache_dir):
                self._cache.setdefault(entry.prompt_hash, entry)
        self.base_url = (self.base_url or os.environ.get(BASE_URL_ENV) or DEFAULT_BASE_URL).rstrip("/")
        self.api_key = self.api_key or os.environ.get(API_KEY_ENV)
        self.organization = self.organization or os.environ.get(ORG_ENV)

    def chat(self, request: ChatRequest) -> str:
        return self.chat_entry(request).response_text

    def chat_entry(self, request: ChatRequest) -> TranscriptEntry:
        key = request.prompt_hash()
        if self.policy.mode != "live":
            with self._lock:
                hit = self._cache.get(key)
            if hit is not None:
                self._record_use(hit)
                return hit
            if self.policy.mode == "replay_only":
                raise ReplayMiss(key)
        entry = self._post(request, key)
        with self._lock:
            self._cache[key] = entry
            if self.policy.cache_dir is not None:
                persist_transcript(entry, self.policy.cache_dir)
            self.used.append(entry)
        return entry

    def _record_use(self, entry: TranscriptEntry) -> None:
        with self._lock:
            self.used.append(entry)

    def _body(self, request: ChatRequest) -> dict[str, Any]:
        body: dict[str, Any] = {
            "model": request.model,
            "messages": [{"role": r, "content": c} for r, c in request.messages],
            "temperature": request.temperature,
        }
        if request.response_format == "json_object":
            body["response_format"] = {"type": "json_object"}
        if self.max_tokens is not None:
            body["max_tokens"] = self.max_tokens
        return body

    def _post(self, request: ChatRequest, key: str) -> TranscriptEntry:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        if self.organization:
            headers["OpenAI-Organization"] = self.organization
        url = f"{self.base_url}/chat/completions"
        last_status = None
        last_error = "no attempt made"
        with httpx.Client(transport=self.transport, timeout=self.timeout) as client:
            for attempt in range(1, MAX_ATTEMPTS + 1):
                start = time.monotonic()
                try:
                    with self._lock:
                        self.network_calls += 1
                    resp = client.post(url, json=self._body(request), headers=headers)
                except httpx.TransportError as exc:
                    last_status, last_error = None, f"transport error: {exc}"
                else:
                    if resp.is_success:
                        data = resp.json()
                        return TranscriptEntry(
                            prompt_hash=key,
                            request=request,
                            response_text=data["choices"][0]["message"]["content"] or "",
                            latency_ms=int((time.monotonic() - start) * 1000),
                            attempt=attempt,
                            timestamp=datetime.now(timezone.utc).isoformat(),
                            usage=data.get("usage"),
                        )
                    last_status, last_error = resp.status_code, f"HTTP {resp.status_code}"
                    if resp.status_code not in RETRY_STATUSES:
                        raise UpstreamUnavailable(f"chat request rejected: {last_error}: {resp.text[:200]}", last_status)
                if attempt < MAX_ATTEMPTS:
                    delay = BACKOFF_BASE * BACKOFF_FACTOR ** (attempt - 1)
                    log.info("chat attempt %d failed (%s); retrying in %.1fs", attempt, last_error, delay)
                    self.sleep(delay)
        raise UpstreamUnavailable(f"chat request failed after {MAX_ATTEMPTS} attempts: {last_error}", last_status)
