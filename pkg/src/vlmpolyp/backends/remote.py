"""Generic chat-with-image HTTP adapter driven by per-provider JSON templates."""

from __future__ import annotations

import base64
import json
import logging
import os
import string
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Optional

import httpx

from .base import (
    AuthError,
    Backend,
    BackendError,
    Conversation,
    GenerationParams,
    MalformedReply,
    NetworkError,
    NetworkTimeout,
    RateLimitExhausted,
    image_bytes,
    image_mime,
)
from .ledger import RunLedger
from .ratelimit import RateLimiter

log = logging.getLogger(__name__)

TRANSIENT_STATUSES = frozenset({408, 429})


def is_transient(status: int) -> bool:
    return status in TRANSIENT_STATUSES or 500 <= status <= 599


@dataclass
class RemoteConfig:
    backend_id: str
    endpoint: str
    request_template: dict
    response_path: str
    auth_env: Optional[str] = None
    auth_header: str = "Authorization"
    auth_prefix: str = "Bearer "
    extra_headers: dict = field(default_factory=dict)
    message_template: dict = field(default_factory=lambda: {"role": "$role", "content": "$parts"})
    text_part: dict = field(default_factory=lambda: {"type": "text", "text": "$text"})
    image_part: dict = field(default_factory=lambda: {"type": "image_url", "image_url": {"url": "data:$mime;base64,$b64"}})
    image_first: bool = False
    role_map: dict = field(default_factory=dict)
    rate_limit_per_minute: int = 60
    max_retries: int = 5
    timeout_s: float = 60.0
    backoff_base_s: float = 1.0
    backoff_cap_s: float = 60.0

    @classmethod
    def from_dict(cls, d: Mapping) -> "RemoteConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known - {"type"}
        if unknown:
            raise ValueError(f"unknown backend config keys: {sorted(unknown)}")
        missing = {"backend_id", "endpoint", "request_template", "response_path"} - set(d)
        if missing:
            raise ValueError(f"backend config missing keys: {sorted(missing)}")
        return cls(**{k: v for k, v in d.items() if k in known})


def fill_template(obj: Any, values: Mapping[str, Any]) -> Any:
    """Substitute ``$name`` placeholders.

    A string that is exactly ``$name`` becomes the raw value (any JSON type);
    dict entries whose value resolves to ``None`` are dropped. Other strings
    get textual substitution.
    """
    if isinstance(obj, dict):
        out = {}
        for k, v in obj.items():
            filled = fill_template(v, values)
            if filled is not None:
                out[k] = filled
        return out
    if isinstance(obj, list):
        return [fill_template(v, values) for v in obj]
    if isinstance(obj, str):
        if obj.startswith("$") and obj[1:] in values:
            return values[obj[1:]]
        if "$" in obj:
            return string.Template(obj).safe_substitute({k: v for k, v in values.items() if isinstance(v, str)})
    return obj


def extract_path(payload: Any, path: str) -> str:
    cur = payload
    for part in path.split("."):
        try:
            cur = cur[int(part)] if isinstance(cur, list) else cur[part]
        except (KeyError, IndexError, ValueError, TypeError):
            raise MalformedReply(f"response has no {path!r} (failed at {part!r})") from None
    if not isinstance(cur, str):
        raise MalformedReply(f"response field {path!r} is not text")
    return cur


class RemoteBackend(Backend):
    def __init__(
        self,
        config: RemoteConfig,
        ledger: Optional[RunLedger] = None,
        limiter: Optional[RateLimiter] = None,
        transport: Optional[httpx.BaseTransport] = None,
        sleep: Callable[[float], None] = time.sleep,
        env: Optional[Mapping[str, str]] = None,
    ):
        super().__init__(config.backend_id, ledger)
        self.config = config
        self.limiter = limiter or RateLimiter(config.rate_limit_per_minute)
        self.sleep = sleep
        self._env = os.environ if env is None else env
        self._client = httpx.Client(timeout=config.timeout_s, transport=transport)

    @classmethod
    def from_config(cls, cfg: Mapping, ledger: Optional[RunLedger] = None, **kw) -> "RemoteBackend":
        return cls(RemoteConfig.from_dict(cfg), ledger=ledger, **kw)

    def close(self) -> None:
        self._client.close()

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json", **self.config.extra_headers}
        if self.config.auth_env:
            key = self._env.get(self.config.auth_env)
            if not key:
                raise AuthError(f"credential env var {self.config.auth_env} is not set")
            headers[self.config.auth_header] = f"{self.config.auth_prefix}{key}"
        return headers

    def build_request(self, conv: Conversation, params: GenerationParams) -> dict:
        cfg = self.config
        messages = []
        for turn in conv.turns:
            parts = [fill_template(cfg.text_part, {"text": turn.text})]
            if turn.image is not None:
                data = image_bytes(turn.image)
                img = fill_template(cfg.image_part, {"mime": image_mime(data), "b64": base64.b64encode(data).decode("ascii")})
                parts = [img] + parts if cfg.image_first else parts + [img]
            messages.append(fill_template(cfg.message_template, {"role": cfg.role_map.get(turn.role, turn.role), "parts": parts}))
        values = {"messages": messages, **params.to_dict()}
        return fill_template(cfg.request_template, values)

    def _backoff(self, attempt: int, response: Optional[httpx.Response]) -> float:
        delay = min(self.config.backoff_cap_s, self.config.backoff_base_s * 2 ** attempt)
        if response is not None:
            try:
                delay = max(delay, min(float(response.headers.get("Retry-After", 0)), self.config.backoff_cap_s))
            except ValueError:
                pass
        return delay

    def _generate(self, conv: Conversation, params: GenerationParams) -> tuple[str, int]:
        body = self.build_request(conv, params)
        headers = self._headers()
        attempt = 0
        while True:
            self.limiter.acquire()
            response = None
            try:
                response = self._client.post(self.config.endpoint, json=body, headers=headers)
            except httpx.TimeoutException as exc:
                failure: BackendError = NetworkTimeout(f"timeout: {exc}")
            except httpx.TransportError as exc:
                err = NetworkError(f"transport failure: {exc}")
                err.retries = attempt
                raise err from exc
            else:
                status = response.status_code
                if status in (401, 403):
                    raise AuthError(f"HTTP {status} from {self.config.endpoint}")
                if 200 <= status < 300:
                    try:
                        payload = response.json()
                    except json.JSONDecodeError:
                        raise MalformedReply("response body is not JSON") from None
                    return extract_path(payload, self.config.response_path), attempt
                if not is_transient(status):
                    raise BackendError(f"HTTP {status}: {response.text[:200]}")
                failure = (RateLimitExhausted if status == 429 else NetworkError)(f"HTTP {status} after {attempt} retries")
            if attempt >= self.config.max_retries:
                failure.retries = attempt
                raise failure
            delay = self._backoff(attempt, response)
            log.info("%s: transient failure (%s), retry %d in %.1fs", self.backend_id, failure, attempt + 1, delay)
            self.sleep(delay)
            attempt += 1


def load_backend_config(path: str | Path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValueError(f"backend config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"backend config {path} is not valid JSON: {exc}") from None
