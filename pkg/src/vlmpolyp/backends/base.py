"""Conversation types, request digests and the backend base class."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

from .ledger import RunLedger

ImageRef = Union[Path, str, bytes]


class BackendError(RuntimeError):
    """Non-retryable backend failure."""


class AuthError(BackendError):
    pass


class MalformedReply(BackendError):
    pass


class UnscriptedRequest(BackendError):
    pass


class NetworkError(BackendError):
    """Transport failure, or transient failures that outlived the retry cap."""


class NetworkTimeout(NetworkError):
    pass


class RateLimitExhausted(NetworkError):
    pass


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 1.0
    max_tokens: int = 512
    seed: Optional[int] = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_tokens <= 0:
            raise ValueError(f"max_tokens must be positive, got {self.max_tokens}")

    def to_dict(self) -> dict:
        return {"temperature": self.temperature, "max_tokens": self.max_tokens, "seed": self.seed}


EVALUATION_PARAMS = GenerationParams(temperature=1.0, max_tokens=512, seed=123)
TILENSE_PARAMS = GenerationParams(temperature=1.0, max_tokens=300, seed=None)
EXTRACTION_PARAMS = GenerationParams(temperature=0.0, max_tokens=512, seed=123)

PRESETS = {"evaluation": EVALUATION_PARAMS, "tilense": TILENSE_PARAMS, "extraction": EXTRACTION_PARAMS}


def image_bytes(ref: ImageRef) -> bytes:
    if isinstance(ref, (bytes, bytearray)):
        return bytes(ref)
    return Path(ref).read_bytes()


def image_mime(data: bytes) -> str:
    if data.startswith(b"\x89PNG"):
        return "image/png"
    if data.startswith(b"\xff\xd8"):
        return "image/jpeg"
    return "application/octet-stream"


@dataclass(frozen=True)
class Turn:
    text: str
    image: Optional[ImageRef] = None
    role: str = "user"

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError("turn text must be non-empty")
        if self.role not in ("user", "assistant"):
            raise ValueError(f"role must be 'user' or 'assistant', got {self.role!r}")


@dataclass(frozen=True)
class Conversation:
    turns: tuple[Turn, ...]

    def __post_init__(self):
        object.__setattr__(self, "turns", tuple(self.turns))
        if not self.turns:
            raise ValueError("conversation needs at least one turn")
        if sum(t.image is not None for t in self.turns) > 1:
            raise ValueError("conversation may carry at most one image")

    def __len__(self) -> int:
        return len(self.turns)

    @property
    def last_user_text(self) -> str:
        for t in reversed(self.turns):
            if t.role == "user":
                return t.text
        return ""

    @property
    def image(self) -> Optional[ImageRef]:
        for t in self.turns:
            if t.image is not None:
                return t.image
        return None

    def then(self, *turns: Turn) -> "Conversation":
        return Conversation(self.turns + tuple(turns))

    def canonical(self) -> list[dict]:
        out = []
        for t in self.turns:
            entry = {"role": t.role, "text": t.text}
            if t.image is not None:
                entry["image_sha256"] = hashlib.sha256(image_bytes(t.image)).hexdigest()
            out.append(entry)
        return out


def request_digest(conv: Conversation, params: GenerationParams, backend_id: str) -> str:
    """Content hash of (conversation, params, backend id); images hash by bytes, not path."""
    payload = {"backend_id": backend_id, "params": params.to_dict(), "turns": conv.canonical()}
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ModelResponse:
    raw_text: str
    backend_id: str
    params: GenerationParams
    latency_ms: float
    cache_hit: bool
    request_digest: str
    retries: int = 0

    def to_dict(self) -> dict:
        return {
            "raw_text": self.raw_text,
            "backend_id": self.backend_id,
            "params": self.params.to_dict(),
            "latency_ms": self.latency_ms,
            "cache_hit": self.cache_hit,
            "request_digest": self.request_digest,
            "retries": self.retries,
        }


class Backend:
    """Base class. Subclasses implement ``_generate`` returning ``(text, retries)``."""

    def __init__(self, backend_id: str, ledger: Optional[RunLedger] = None):
        self.backend_id = backend_id
        self.ledger = ledger

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.backend_id!r})"

    def _generate(self, conv: Conversation, params: GenerationParams) -> tuple[str, int]:
        raise NotImplementedError

    def complete(self, conv: Conversation, params: GenerationParams) -> ModelResponse:
        digest = request_digest(conv, params, self.backend_id)
        t0 = time.perf_counter()
        try:
            text, retries = self._generate(conv, params)
        except BackendError as exc:
            if self.ledger is not None:
                self.ledger.record(
                    digest=digest, backend_id=self.backend_id, status="error",
                    latency_ms=(time.perf_counter() - t0) * 1000.0,
                    retries=getattr(exc, "retries", 0), error=f"{type(exc).__name__}: {exc}",
                )
            raise
        latency = (time.perf_counter() - t0) * 1000.0
        resp = ModelResponse(text, self.backend_id, params, latency, False, digest, retries)
        if self.ledger is not None:
            self.ledger.record(digest=digest, backend_id=self.backend_id, status="ok",
                               latency_ms=latency, retries=retries)
        return resp


def complete(backend: Backend, conv: Conversation, params: GenerationParams) -> ModelResponse:
    return backend.complete(conv, params)

