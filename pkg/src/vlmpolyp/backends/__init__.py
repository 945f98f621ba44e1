"""Chat-with-image backends behind one interface: remote HTTP and scripted mock."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional

from .base import (
    EVALUATION_PARAMS,
    EXTRACTION_PARAMS,
    PRESETS,
    TILENSE_PARAMS,
    AuthError,
    Backend,
    BackendError,
    Conversation,
    GenerationParams,
    MalformedReply,
    ModelResponse,
    NetworkError,
    NetworkTimeout,
    RateLimitExhausted,
    Turn,
    UnscriptedRequest,
    complete,
    image_bytes,
    request_digest,
)
from .cache import ResponseCache, cached_complete, converse
from .ledger import RunLedger
from .mock import MockBackend
from .ratelimit import RateLimiter
from .remote import RemoteBackend, RemoteConfig, load_backend_config

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"
DEFAULT_MOCK_REPLY = "The image shows normal colonic mucosa; no polyp is seen."

__all__ = [
    "AuthError", "Backend", "CONFIG_DIR", "BackendError", "Conversation", "EVALUATION_PARAMS", "EXTRACTION_PARAMS",
    "GenerationParams", "MalformedReply", "MockBackend", "ModelResponse", "NetworkError", "NetworkTimeout",
    "PRESETS", "RateLimitExhausted", "RateLimiter", "RemoteBackend", "RemoteConfig", "ResponseCache",
    "RunLedger", "TILENSE_PARAMS", "Turn", "UnscriptedRequest", "build_backend", "cached_complete",
    "complete", "converse", "image_bytes", "load_backend", "request_digest",
]


def build_backend(cfg: Mapping, ledger: Optional[RunLedger] = None, base_dir: Path | None = None) -> Backend:
    kind = cfg.get("type", "remote")
    if kind == "mock":
        return MockBackend.from_config(cfg, ledger=ledger, base_dir=base_dir)
    if kind == "remote":
        return RemoteBackend.from_config(cfg, ledger=ledger)
    raise ValueError(f"unknown backend type {kind!r}")


def load_backend(spec: str | Path, ledger: Optional[RunLedger] = None) -> Backend:
    """``"mock"`` gives the built-in constant mock; a bare name such as
    ``openai_gpt4`` picks a bundled config; anything else is a config file path."""
    if str(spec) == "mock":
        return MockBackend(default=DEFAULT_MOCK_REPLY, ledger=ledger)
    path = Path(spec)
    if not path.exists() and (CONFIG_DIR / f"{spec}.json").is_file():
        path = CONFIG_DIR / f"{spec}.json"
    return build_backend(load_backend_config(path), ledger=ledger, base_dir=path.parent)
