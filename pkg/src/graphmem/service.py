"""Chat-completion style JSON-over-HTTP client with bounded retries and in-flight cap."""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Any

import requests

logger = logging.getLogger(__name__)

ENV_ENDPOINT = "GRAPHMEM_ENDPOINT"
ENV_MODEL = "GRAPHMEM_MODEL"
ENV_TOKEN = "GRAPHMEM_API_TOKEN"


class TransportError(RuntimeError):
    """The service could not be reached or kept failing after all retries."""


class ClientError(TransportError):
    """A 4xx answer; retrying would not help."""


@dataclass
class ServiceConfig:
    endpoint: str = "http://localhost:8000/v1"
    model: str = "default"
    token: str | None = None
    timeout_s: float = 60.0
    max_attempts: int = 3
    backoff_s: float = 0.5
    max_in_flight: int = 4
    max_tokens: int = 256

    @classmethod
    def from_env(cls, **overrides: Any) -> "ServiceConfig":
        cfg = cls(
            endpoint=os.environ.get(ENV_ENDPOINT, cls.endpoint),
            model=os.environ.get(ENV_MODEL, cls.model),
            token=os.environ.get(ENV_TOKEN),
        )
        for k, v in overrides.items():
            if v is not None:
                setattr(cfg, k, v)
        return cfg


@dataclass
class ServiceClient:
    config: ServiceConfig = field(default_factory=ServiceConfig)
    session: requests.Session = field(default_factory=requests.Session)
    retries_logged: int = 0

    def __post_init__(self) -> None:
        self._slots = threading.BoundedSemaphore(self.config.max_in_flight)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.config.token:
            headers["Authorization"] = f"Bearer {self.config.token}"
        return headers

    def post(self, path: str, payload: dict) -> dict:
        url = self.config.endpoint.rstrip("/") + "/" + path.lstrip("/")
        last: Exception | None = None
        for attempt in range(1, self.config.max_attempts + 1):
            try:
                with self._slots:
                    resp = self.session.post(
                        url, json=payload, headers=self._headers(), timeout=self.config.timeout_s
                    )
                if 400 <= resp.status_code < 500 and resp.status_code != 429:
                    raise ClientError(f"HTTP {resp.status_code} from {url}: {resp.text[:200]}")
                if resp.status_code >= 400:
                    raise TransportError(f"HTTP {resp.status_code} from {url}")
                return resp.json()
            except ClientError:
                raise
            except (requests.RequestException, TransportError, ValueError) as exc:
                last = exc
                if attempt == self.config.max_attempts:
                    break
                self.retries_logged += 1
                logger.warning("request to %s failed (attempt %d/%d): %s", url, attempt, self.config.max_attempts, exc)
                time.sleep(self.config.backoff_s * 2 ** (attempt - 1))
        raise TransportError(f"giving up on {url} after {self.config.max_attempts} attempts: {last}") from last

    def chat(self, prompt: str, *, temperature: float = 0.0, max_tokens: int | None = None) -> str:
        payload = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
            "max_tokens": max_tokens or self.config.max_tokens,
        }
        data = self.post("chat/completions", payload)
        try:
            return data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected response shape: {str(data)[:200]}") from exc

    def token_logprobs(self, prompt: str, continuation: str) -> list[float]:
        """Teacher-forced per-token log-probabilities via a completions ``echo`` request."""
        payload = {
            "model": self.config.model,
            "prompt": prompt + continuation,
            "max_tokens": 0,
            "echo": True,
            "logprobs": 1,
            "temperature": 0.0,
        }
        data = self.post("completions", payload)
        try:
            lp = data["choices"][0]["logprobs"]
            offsets = lp["text_offset"]
            values = lp["token_logprobs"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError("service did not return token log-probabilities") from exc
        start = len(prompt)
        return [float(v) for off, v in zip(offsets, values) if off >= start and v is not None]
