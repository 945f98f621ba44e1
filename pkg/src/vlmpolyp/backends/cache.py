"""On-disk response cache keyed by request digest."""

from __future__ import annotations

import json
import logging
import os
import tempfile
import threading
from pathlib import Path
from typing import Optional

from .base import Backend, Conversation, GenerationParams, ModelResponse, Turn, request_digest

log = logging.getLogger(__name__)


class ResponseCache:
    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def path(self, digest: str) -> Path:
        return self.directory / f"{digest}.json"

    def get(self, digest: str) -> Optional[str]:
        p = self.path(digest)
        if not p.exists():
            return None
        try:
            entry = json.loads(p.read_text(encoding="utf-8"))
            if entry["digest"] != digest or not isinstance(entry["raw_text"], str):
                raise ValueError("digest mismatch")
        except (OSError, ValueError, KeyError, TypeError) as exc:
            log.warning("cache entry %s unusable (%s); treating as miss", p.name, exc)
            return None
        return entry["raw_text"]

    def put(self, response: ModelResponse) -> None:
        entry = {
            "digest": response.request_digest,
            "raw_text": response.raw_text,
            "backend_id": response.backend_id,
            "params": response.params.to_dict(),
        }
        with self._lock:
            fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(entry, fh, sort_keys=True)
            os.replace(tmp, self.path(response.request_digest))


def cached_complete(
    cache: Optional[ResponseCache],
    backend: Backend,
    conv: Conversation,
    params: GenerationParams,
    replay: bool = False,
) -> ModelResponse:
    """Serve from ``cache`` when possible, otherwise call ``backend`` and store.

    Seedless requests are sampled live unless ``replay`` is set.
    """
    if cache is None or (params.seed is None and not replay):
        return backend.complete(conv, params)
    digest = request_digest(conv, params, backend.backend_id)
    text = cache.get(digest)
    if text is not None:
        return ModelResponse(text, backend.backend_id, params, 0.0, True, digest, 0)
    response = backend.complete(conv, params)
    cache.put(response)
    return response


def converse(
    backend: Backend,
    conv: Conversation,
    params: GenerationParams,
    cache: Optional[ResponseCache] = None,
    replay: bool = False,
) -> list[ModelResponse]:
    """Send each user turn in the same chat, threading earlier replies back in.

    Returns one response per user turn.
    """
    history: list[Turn] = []
    responses = []
    for turn in conv.turns:
        history.append(turn)
        if turn.role != "user":
            continue
        response = cached_complete(cache, backend, Conversation(tuple(history)), params, replay)
        responses.append(response)
        history.append(Turn(response.raw_text if response.raw_text.strip() else "(empty reply)", role="assistant"))
    return responses
