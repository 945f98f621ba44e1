"""Registry of the prompt protocols, stored as text assets next to this module."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

from ..backends.base import Conversation, ImageRef, Turn

ASSET_DIR = Path(__file__).with_name("assets")
TEMPLATE_IDS = ("simple_detect", "simple_classify", "engineered_detect", "engineered_classify")


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class TurnTemplate:
    text: str
    image: bool


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    turns: tuple[TurnTemplate, ...]

    @property
    def protocol(self) -> str:
        return self.id.split("_", 1)[0]

    @property
    def task(self) -> str:
        return self.id.split("_", 1)[1]


def _read_asset(directory: Path, name: str) -> str:
    text = (directory / name).read_text(encoding="utf-8")
    return text[:-1] if text.endswith("\n") else text


def load_registry(directory: str | Path | None = None) -> dict[str, PromptTemplate]:
    directory = Path(directory) if directory else ASSET_DIR
    index = json.loads((directory / "registry.json").read_text(encoding="utf-8"))
    registry = {}
    for tid, turns in index.items():
        registry[tid] = PromptTemplate(
            tid, tuple(TurnTemplate(_read_asset(directory, t["file"]), bool(t["image"])) for t in turns)
        )
    return registry


@lru_cache(maxsize=None)
def _default_registry() -> dict[str, PromptTemplate]:
    return load_registry()


def get_template(template_id: str) -> PromptTemplate:
    registry = _default_registry()
    try:
        return registry[template_id]
    except KeyError:
        raise PromptError(f"unknown template {template_id!r}; registered ids: {', '.join(registry)}") from None


def render(template: PromptTemplate | str, image_ref: ImageRef) -> Conversation:
    """Build the user-side conversation with the image attached to the first turn.

    Multi-turn templates are rendered in full; callers interleave the model's
    replies when running them in the same chat.
    """
    if isinstance(template, str):
        template = get_template(template)
    if not isinstance(image_ref, (bytes, bytearray)) and not Path(image_ref).is_file():
        raise PromptError(f"image not found: {image_ref}")
    turns = [Turn(t.text, image_ref if t.image else None) for t in template.turns]
    return Conversation(tuple(turns))


def option_strings() -> tuple[str, ...]:
    """The seven numbered answer options of the engineered classification turn."""
    text = get_template("engineered_classify").turns[-1].text
    return tuple(m.group(0).rstrip(".") for m in re.finditer(r"(?m)^[1-7]\. .+$", text))
