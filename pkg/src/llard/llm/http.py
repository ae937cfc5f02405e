"""OpenAI-compatible chat-completion and embedding client."""

from __future__ import annotations

import os
import time

import httpx
import numpy as np

from .gateway import (
    GatewayTimeout,
    PromptRequest,
    ProviderConfig,
    ProviderError,
    TransportError,
    backoff_sleep,
)

RETRYABLE_STATUS = {408, 409, 429, 500, 502, 503, 504}


class HTTPProvider:
    def __init__(self, config: ProviderConfig, client: httpx.Client | None = None, sleep=time.sleep):
        self.config = config
        self.model = config.model
        self._sleep = sleep
        headers = {}
        key = os.environ.get(config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = client or httpx.Client(timeout=config.timeout)
        self._headers = headers

    def _post(self, path: str, payload: dict) -> dict:
        url = self.config.endpoint.rstrip("/") + path
        last: Exception | None = None
        for attempt in range(1, self.config.max_attempts + 1):
            try:
                resp = self._client.post(url, json=payload, headers=self._headers, timeout=self.config.timeout)
            except httpx.TimeoutException as exc:
                last = GatewayTimeout(f"request to {url} timed out after {self.config.timeout}s")
                last.__cause__ = exc
            except httpx.TransportError as exc:
                last = TransportError(f"transport failure talking to {url}: {exc}")
            else:
                if 200 <= resp.status_code < 300:
                    return resp.json()
                last = ProviderError(resp.status_code, resp.text)
                if resp.status_code not in RETRYABLE_STATUS:
                    raise last
            if attempt < self.config.max_attempts:
                backoff_sleep(attempt, self.config.backoff_base, self._sleep)
        assert last is not None
        raise last

    def complete(self, request: PromptRequest) -> str:
        body = self._post("/chat/completions", {
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        })
        try:
            return body["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError):
            raise ProviderError(200, f"unexpected completion payload: {body!r}") from None

    def embed(self, text: str) -> np.ndarray:
        body = self._post("/embeddings", {
            "model": self.config.embedding_model or self.config.model,
            "input": [text],
        })
        try:
            return np.asarray(body["data"][0]["embedding"], dtype=np.float64)
        except (KeyError, IndexError, TypeError):
            raise ProviderError(200, f"unexpected embedding payload: {body!r}") from None
