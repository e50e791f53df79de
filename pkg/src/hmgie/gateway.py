"""Backend-agnostic access to text and vision models.

Two backends ship with the package: an HTTP client speaking the common
chat-completions wire shape, and a scripted replay backend that serves
recorded replies keyed by request digest. The Gateway wraps either one with
caching, retry with exponential backoff, and coalescing of concurrent
duplicate requests, so an entire run over the scripted backend is a pure
function of its inputs and fixtures.
"""

from __future__ import annotations

import base64
import hashlib
import json
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Optional, Protocol

import requests

from .errors import (
    AuthError,
    ExhaustedError,
    FixtureMissingError,
    GatewayError,
    SchemaViolationError,
    TransientBackendError,
    UnsupportedRequestError,
)

_MAGIC_SIGNATURES = (
    (b"\x89PNG\r\n\x1a\n", "image/png"),
    (b"\xff\xd8\xff", "image/jpeg"),
    (b"GIF87a", "image/gif"),
    (b"GIF89a", "image/gif"),
    (b"BM", "image/bmp"),
)


def sniff_media_type(data: bytes) -> Optional[str]:
    """Best-effort media type from magic bytes; None when unrecognized."""
    for magic, media in _MAGIC_SIGNATURES:
        if data.startswith(magic):
            return media
    if len(data) >= 12 and data[:4] == b"RIFF" and data[8:12] == b"WEBP":
        return "image/webp"
    return None


class RequestKind(Enum):
    TEXT = "text"
    VISION = "vision"


@dataclass(frozen=True)
class ModelRequest:
    """One model call; vision requests carry the image and its digest."""

    kind: RequestKind
    prompt: str
    model_id: str = "gpt-4o"
    temperature: float = 0.3
    max_output_tokens: int = 1024
    image_digest: Optional[str] = None
    image_payload: Optional[bytes] = None

    def __post_init__(self):
        if self.temperature < 0:
            raise SchemaViolationError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise SchemaViolationError("max_output_tokens must be positive")
        if self.kind is RequestKind.VISION:
            if self.image_digest is None or self.image_payload is None:
                raise SchemaViolationError("vision requests need digest and payload")
            actual = hashlib.sha256(self.image_payload).hexdigest()
            if actual != self.image_digest:
                raise SchemaViolationError("image digest does not match payload")
        elif self.image_digest is not None or self.image_payload is not None:
            raise SchemaViolationError("text requests must not carry an image")

    @classmethod
    def vision(cls, prompt: str, image_payload: bytes, **kwargs) -> "ModelRequest":
        digest = hashlib.sha256(image_payload).hexdigest()
        return cls(
            kind=RequestKind.VISION,
            prompt=prompt,
            image_digest=digest,
            image_payload=image_payload,
            **kwargs,
        )


@dataclass(frozen=True)
class ModelResponse:
    text: str
    latency_ms: int = 0
    cached: int = 0


def cache_key(request: ModelRequest) -> str:
    """Deterministic request digest.

    Depends on (model_id, temperature, kind, prompt, image_digest) only;
    max_output_tokens and wall clock never influence the key.
    """
    canonical = json.dumps(
        {
            "kind": request.kind.value,
            "model_id": request.model_id,
            "temperature": request.temperature,
            "prompt": request.prompt,
            "image_digest": request.image_digest,
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class Backend(Protocol):
    """Minimal surface a backend must provide."""

    name: str
    supports_vision: bool

    def complete(self, request: ModelRequest) -> str: ...


class HttpBackend:
    """Chat-completions HTTP client; images travel as base64 data URLs."""

    def __init__(
        self,
        endpoint: str,
        api_key: str,
        supports_vision: bool = True,
        timeout: float = 120.0,
        system_prompt: Optional[str] = None,
        session: Optional[requests.Session] = None,
    ):
        self.name = f"http:{endpoint}"
        self.endpoint = endpoint.rstrip("/")
        self.api_key = api_key
        self.supports_vision = supports_vision
        self.timeout = timeout
        self.system_prompt = system_prompt
        self._session = session or requests.Session()

    def _messages(self, request: ModelRequest) -> list[dict]:
        messages: list[dict] = []
        if self.system_prompt:
            messages.append({"role": "system", "content": self.system_prompt})
        if request.kind is RequestKind.TEXT:
            messages.append({"role": "user", "content": request.prompt})
        else:
            media = sniff_media_type(request.image_payload or b"") or "image/jpeg"
            encoded = base64.b64encode(request.image_payload or b"").decode("ascii")
            messages.append(
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": request.prompt},
                        {
                            "type": "image_url",
                            "image_url": {"url": f"data:{media};base64,{encoded}"},
                        },
                    ],
                }
            )
        return messages

    def complete(self, request: ModelRequest) -> str:
        body = {
            "model": request.model_id,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
            "messages": self._messages(request),
        }
        try:
            response = self._session.post(
                f"{self.endpoint}/chat/completions",
                json=body,
                headers={"Authorization": f"Bearer {self.api_key}"},
                timeout=self.timeout,
            )
        except (requests.Timeout, requests.ConnectionError) as exc:
            raise TransientBackendError(f"transport failure: {exc}") from exc
        if response.status_code in (401, 403):
            raise AuthError(f"backend rejected credentials (HTTP {response.status_code})")
        if response.status_code == 429 or response.status_code >= 500:
            raise TransientBackendError(f"HTTP {response.status_code}: {response.text[:200]}")
        if response.status_code >= 400:
            raise GatewayError(f"HTTP {response.status_code}: {response.text[:200]}")
        try:
            content = response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"unexpected response shape: {exc}") from exc
        return content if isinstance(content, str) else ""


class ScriptedBackend:
    """Replay backend serving recorded replies keyed by cache_key.

    Fixtures come from an in-memory mapping, a directory of one file per
    key (content = raw reply text), or both; the mapping wins on overlap.
    Every served request is appended to .calls for trace assertions.
    """

    def __init__(
        self,
        fixture_dir: Optional[str | Path] = None,
        fixtures: Optional[Mapping[str, str]] = None,
    ):
        if fixture_dir is None and fixtures is None:
            raise ValueError("scripted backend needs a fixture dir or mapping")
        self.name = "scripted"
        self.supports_vision = True
        self.fixture_dir = Path(fixture_dir) if fixture_dir is not None else None
        self.fixtures = dict(fixtures or {})
        self.calls: list[ModelRequest] = []
        self._lock = threading.Lock()

    def complete(self, request: ModelRequest) -> str:
        key = cache_key(request)
        with self._lock:
            self.calls.append(request)
        if key in self.fixtures:
            return self.fixtures[key]
        if self.fixture_dir is not None:
            path = self.fixture_dir / f"{key}.txt"
            if path.exists():
                return path.read_text(encoding="utf-8")
        raise FixtureMissingError(key)


@dataclass(frozen=True)
class RetryPolicy:
    """Exponential backoff; total sleep never exceeds max_total_delay."""

    attempts: int = 3
    base_delay: float = 1.0
    multiplier: float = 2.0
    max_total_delay: float = 30.0

    def __post_init__(self):
        if self.attempts < 1:
            raise SchemaViolationError("retry attempts must be >= 1")
        if self.base_delay < 0 or self.max_total_delay < 0:
            raise SchemaViolationError("retry delays must be >= 0")


class Gateway:
    """Caching, retrying, coalescing front door to a backend.

    With cache_dir set, replies are read through the on-disk store (one file
    per cache key); record=True additionally writes live replies back, so a
    real run can later be replayed with a ScriptedBackend over the same
    directory.
    """

    def __init__(
        self,
        backend: Backend,
        cache_dir: Optional[str | Path] = None,
        record: bool = False,
        retry: Optional[RetryPolicy] = None,
        sleeper: Callable[[float], None] = time.sleep,
        use_memory_cache: bool = True,
    ):
        self.backend = backend
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        if record and self.cache_dir is None:
            raise ValueError("record mode requires a cache_dir")
        self.record = record
        self.retry = retry or RetryPolicy()
        self._sleeper = sleeper
        self._memory: Optional[dict[str, str]] = {} if use_memory_cache else None
        self._lock = threading.Lock()
        self._inflight: dict[str, threading.Lock] = {}
        self.live_calls = 0

    def _cached_text(self, key: str) -> Optional[str]:
        if self._memory is not None and key in self._memory:
            return self._memory[key]
        if self.cache_dir is not None:
            path = self.cache_dir / f"{key}.txt"
            if path.exists():
                text = path.read_text(encoding="utf-8")
                if self._memory is not None:
                    self._memory[key] = text
                return text
        return None

    def _store(self, key: str, text: str) -> None:
        if self._memory is not None:
            self._memory[key] = text
        if self.record and self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            (self.cache_dir / f"{key}.txt").write_text(text, encoding="utf-8")

    def _complete_with_retries(self, request: ModelRequest) -> str:
        delay = self.retry.base_delay
        slept = 0.0
        last: Optional[Exception] = None
        for attempt in range(self.retry.attempts):
            try:
                with self._lock:
                    self.live_calls += 1
                return self.backend.complete(request)
            except TransientBackendError as exc:
                last = exc
                if attempt + 1 < self.retry.attempts:
                    budget = self.retry.max_total_delay - slept
                    pause = max(0.0, min(delay, budget))
                    if pause > 0:
                        self._sleeper(pause)
                        slept += pause
                    delay *= self.retry.multiplier
        raise ExhaustedError(
            f"backend {self.backend.name} failed after {self.retry.attempts} attempts: {last}"
        ) from last

    def call(self, request: ModelRequest) -> ModelResponse:
        """Resolve a request through cache, coalescing, and retry.

        Raises:
            UnsupportedRequestError: vision request to a text-only backend.
            AuthError: credentials rejected (never retried).
            ExhaustedError: retries exceeded, or scripted fixture missing.
        """
        if request.kind is RequestKind.VISION and not self.backend.supports_vision:
            raise UnsupportedRequestError(
                f"backend {self.backend.name} cannot serve vision requests"
            )
        key = cache_key(request)
        cached = self._cached_text(key)
        if cached is not None:
            return ModelResponse(text=cached, latency_ms=0, cached=1)
        with self._lock:
            gate = self._inflight.setdefault(key, threading.Lock())
        with gate:
            cached = self._cached_text(key)
            if cached is not None:
                # A concurrent duplicate finished first; serve its result.
                return ModelResponse(text=cached, latency_ms=0, cached=1)
            started = time.monotonic()
            text = self._complete_with_retries(request)
            latency_ms = int((time.monotonic() - started) * 1000)
            self._store(key, text)
            return ModelResponse(text=text, latency_ms=latency_ms, cached=0)
