"""Deterministic scripted backend for offline runs and tests."""

from __future__ import annotations

import hashlib
import json
import threading
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

from .base import Backend, Conversation, GenerationParams, UnscriptedRequest, image_bytes, request_digest
from .ledger import RunLedger

Responder = Callable[[Conversation, GenerationParams], str]


class MockBackend(Backend):
    """Answers from, in order: the digest script, a responder callable, keyword
    rules on the last user turn, then ``default``.

    In strict mode only scripted digests are answered. ``rules`` entries are
    dicts with ``reply`` and optional ``contains`` (case-insensitive substring
    of the last user turn) and ``image_sha256`` keys; all given keys must match.
    """

    def __init__(
        self,
        script: Optional[Mapping[str, str]] = None,
        responder: Optional[Responder] = None,
        rules: Sequence[Mapping[str, str]] = (),
        default: Optional[str] = None,
        strict: bool = False,
        backend_id: str = "mock",
        ledger: Optional[RunLedger] = None,
    ):
        super().__init__(backend_id, ledger)
        self.script = dict(script or {})
        self.responder = responder
        self.rules = [dict(r) for r in rules]
        self.default = default
        self.strict = strict
        self.calls: list[str] = []
        self._lock = threading.Lock()

    @classmethod
    def from_config(cls, cfg: Mapping, ledger: Optional[RunLedger] = None, base_dir: Path | None = None) -> "MockBackend":
        script = dict(cfg.get("script", {}))
        if cfg.get("script_file"):
            p = Path(cfg["script_file"])
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            script.update(json.loads(p.read_text(encoding="utf-8")))
        return cls(
            script=script,
            rules=cfg.get("rules", ()),
            default=cfg.get("default"),
            strict=bool(cfg.get("strict", False)),
            backend_id=cfg.get("backend_id", "mock"),
            ledger=ledger,
        )

    def _match_rule(self, conv: Conversation) -> Optional[str]:
        text = conv.last_user_text.lower()
        img_hash = None
        for rule in self.rules:
            if "contains" in rule and rule["contains"].lower() not in text:
                continue
            if "image_sha256" in rule:
                if img_hash is None:
                    img = conv.image
                    img_hash = hashlib.sha256(image_bytes(img)).hexdigest() if img is not None else ""
                if rule["image_sha256"] != img_hash:
                    continue
            return rule["reply"]
        return None

    def _generate(self, conv: Conversation, params: GenerationParams) -> tuple[str, int]:
        digest = request_digest(conv, params, self.backend_id)
        with self._lock:
            self.calls.append(digest)
        if digest in self.script:
            return self.script[digest], 0
        if self.strict:
            raise UnscriptedRequest(f"unscripted request {digest[:12]}")
        if self.responder is not None:
            return self.responder(conv, params), 0
        reply = self._match_rule(conv)
        if reply is not None:
            return reply, 0
        if self.default is not None:
            return self.default, 0
        raise UnscriptedRequest(f"unscripted request {digest[:12]}")

    @property
    def call_count(self) -> int:
        return len(self.calls)
