from __future__ import annotations

import hashlib
import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np


class GatewayError(RuntimeError):
    pass


class TransportError(GatewayError):
    """Network failure that persisted through every retry."""


class ProviderError(GatewayError):
    def __init__(self, status: int, body: str = ""):
        super().__init__(f"provider returned HTTP {status}: {body[:200]}")
        self.status = status


class GatewayTimeout(GatewayError):
    pass


class ParseError(ValueError):
    """A model response that does not follow the requested grammar."""

    def __init__(self, message: str, raw: str):
        super().__init__(f"{message}; raw response: {raw[:300]!r}")
        self.raw = raw


@dataclass(frozen=True)
class PromptRequest:
    system_text: str
    user_text: str
    max_tokens: int = 512
    temperature: float = 0.0
    tag: str = ""

    def __post_init__(self):
        if not self.system_text or not self.user_text:
            raise ValueError("system_text and user_text must be non-empty")
        if self.max_tokens < 1 or self.temperature < 0:
            raise ValueError("max_tokens must be >= 1 and temperature >= 0")


@dataclass(frozen=True)
class ProviderConfig:
    endpoint: str
    model: str
    embedding_model: str = ""
    api_key_env: str = "LLARD_API_KEY"
    timeout: float = 60.0
    max_parallel: int = 4
    max_attempts: int = 3
    backoff_base: float = 1.0

    def __post_init__(self):
        if self.max_parallel < 1 or self.max_attempts < 1:
            raise ValueError("max_parallel and max_attempts must be >= 1")


class Provider(Protocol):
    model: str

    def complete(self, request: PromptRequest) -> str: ...

    def embed(self, text: str) -> np.ndarray: ...


def completion_key(model: str, request: PromptRequest) -> str:
    blob = json.dumps([model, request.system_text, request.user_text, request.temperature])
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def embedding_key(model: str, text: str) -> str:
    blob = json.dumps(["embed", model, text])
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class ResponseCache:
    """Append-only, content-addressed store of completions and embeddings.

    Record layout: ``<sha256 hex>\\n<kind>\\n<payload length>\\n<payload>\\n``
    where kind is ``text`` (UTF-8) or ``f64`` (little-endian float64 vector).
    A truncated trailing record (interrupted write) is ignored on load.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._data: dict[str, tuple[str, bytes]] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        raw = self.path.read_bytes()
        pos = 0
        while pos < len(raw):
            try:
                nl1 = raw.index(b"\n", pos)
                nl2 = raw.index(b"\n", nl1 + 1)
                nl3 = raw.index(b"\n", nl2 + 1)
                key = raw[pos:nl1].decode("ascii")
                kind = raw[nl1 + 1:nl2].decode("ascii")
                length = int(raw[nl2 + 1:nl3])
            except ValueError:
                break
            start = nl3 + 1
            end = start + length
            if end + 1 > len(raw):
                break
            self._data[key] = (kind, raw[start:end])
            pos = end + 1

    def __len__(self) -> int:
        return len(self._data)

    def __contains__(self, key: str) -> bool:
        return key in self._data

    def get(self, key: str) -> tuple[str, bytes] | None:
        return self._data.get(key)

    def put(self, key: str, kind: str, payload: bytes) -> None:
        with self._lock:
            if key in self._data:
                return
            self._data[key] = (kind, payload)
            if self.path is not None:
                header = f"{key}\n{kind}\n{len(payload)}\n".encode("ascii")
                with open(self.path, "ab") as fh:
                    fh.write(header + payload + b"\n")


@dataclass
class GatewayStats:
    hits: int = 0
    misses: int = 0
    provider_calls: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def bump(self, name: str) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + 1)


class LLMGateway:
    """Cached, concurrency-bounded access to one provider."""

    def __init__(self, provider: Provider, cache: ResponseCache | None = None, max_parallel: int = 4):
        if max_parallel < 1:
            raise ValueError("max_parallel must be >= 1")
        self.provider = provider
        self.cache = cache if cache is not None else ResponseCache()
        self.max_parallel = max_parallel
        self.stats = GatewayStats()
        self._slots = threading.BoundedSemaphore(max_parallel)

    def complete(self, request: PromptRequest) -> str:
        key = completion_key(self.provider.model, request)
        hit = self.cache.get(key)
        if hit is not None:
            self.stats.bump("hits")
            return hit[1].decode("utf-8")
        self.stats.bump("misses")
        with self._slots:
            self.stats.bump("provider_calls")
            text = self.provider.complete(request)
        self.cache.put(key, "text", text.encode("utf-8"))
        return text

    def embed_text(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed empty text")
        key = embedding_key(self.provider.model, text)
        hit = self.cache.get(key)
        if hit is not None:
            self.stats.bump("hits")
            return np.frombuffer(hit[1], dtype="<f8").copy()
        self.stats.bump("misses")
        with self._slots:
            self.stats.bump("provider_calls")
            vec = np.asarray(self.provider.embed(text), dtype="<f8")
        self.cache.put(key, "f64", vec.tobytes())
        return vec

    def map(self, fn, items: Sequence, return_exceptions: bool = False) -> list:
        """Apply ``fn`` over ``items`` on up to ``max_parallel`` threads, keeping order."""
        def call(x):
            try:
                return fn(x)
            except Exception as exc:
                if return_exceptions:
                    return exc
                raise

        if self.max_parallel == 1 or len(items) <= 1:
            return [call(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.max_parallel) as pool:
            return list(pool.map(call, items))

    def complete_many(self, requests: Sequence[PromptRequest], return_exceptions: bool = False) -> list:
        return self.map(self.complete, requests, return_exceptions)

    def embed_many(self, texts: Sequence[str], return_exceptions: bool = False) -> list:
        return self.map(self.embed_text, texts, return_exceptions)


def backoff_sleep(attempt: int, base: float, sleep=time.sleep) -> None:
    sleep(base * (2 ** (attempt - 1)))
