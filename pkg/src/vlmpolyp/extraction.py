"""Free-text answers to the five structured response categories.

Rule-based matching runs first; an LLM extractor is consulted only when the
rules cannot find a commitment (``NeedsHuman_Unsure``).
"""

from __future__ import annotations

import csv
import json
import random
import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Optional, Sequence

from pydantic import BaseModel, ValidationError, field_validator

from .backends import EXTRACTION_PARAMS, Backend, Conversation, ResponseCache, Turn, cached_complete
from .labels import (
    NO_ANSWER,
    NORMAL,
    POLYP,
    TWO_OPTIONS,
    POLYP_CODES,
    PathologyClass,
    check_task,
)

SYNONYM_TABLE = Path(__file__).with_name("data") / "synonyms.csv"


class Category(str, Enum):
    NEEDS_HUMAN_UNSURE = "NeedsHuman_Unsure"
    NEEDS_HUMAN_MULTIPLE_OR_NONE = "NeedsHuman_MultipleOrNone"
    NO_POLYP = "NoPolyp"
    POLYP_DETECTED = "PolypDetected"
    POLYP_TYPE = "PolypType"

    @property
    def number(self) -> int:
        return list(Category).index(self) + 1


CATEGORY_DESCRIPTIONS = {
    Category.NEEDS_HUMAN_UNSURE: "Human evaluation needed: I am unsure",
    Category.NEEDS_HUMAN_MULTIPLE_OR_NONE: "Human evaluation needed: More than one diagnosis is selected, or no option is selected",
    Category.NO_POLYP: "The unstructured answer selected: No polyp is detected in the image",
    Category.POLYP_DETECTED: "The unstructured answer selected: A polyp is detected in the image",
    Category.POLYP_TYPE: "The unstructured answer selected: The polyp type is classified as {polyp_type}",
}


@dataclass(frozen=True)
class ExtractionOutcome:
    category: Category
    pathology: Optional[PathologyClass] = None
    method: str = "rules"
    evidence_span: str = ""

    def __post_init__(self):
        if self.category is Category.POLYP_TYPE:
            if self.pathology is None or not self.pathology.is_polyp:
                raise ValueError("PolypType outcome needs a polyp pathology class")
        elif self.pathology is not None:
            raise ValueError(f"{self.category.value} outcome must not carry a pathology class")
        if self.method not in ("rules", "llm"):
            raise ValueError(f"method must be 'rules' or 'llm', got {self.method!r}")

    def to_dict(self) -> dict:
        return {
            "category": self.category.value,
            "pathology": self.pathology.code if self.pathology else None,
            "method": self.method,
            "evidence_span": self.evidence_span,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractionOutcome":
        return cls(
            Category(d["category"]),
            PathologyClass.from_code(d["pathology"]) if d.get("pathology") else None,
            d.get("method", "rules"),
            d.get("evidence_span", ""),
        )


# Matching patterns. Kinds: "class" (carries a PathologyClass), "affirm"
# (polyp present, no type), "neutral" (consumed, no signal).
_NEG_HEAD = r"\b(?:no|not|without|absence of|free of|negative for|nor|isn't|is not|are not|aren't)\s+(?:[a-z]+[\s,-]+){0,3}?"
_LESION = r"(?:polyps?|lesions?|abnormalit(?:y|ies)|masses|mass|growths?|tumou?rs?)\b"
# "no polyp or other lesion" is one negated span, not a negation plus a finding.
_NEG_LESION = re.compile(_NEG_HEAD + _LESION + r"(?:,?\s+(?:or|and|nor)\s+(?:other\s+|any\s+)?" + _LESION + ")*")
_NEG_MALIGNANCY = re.compile(_NEG_HEAD + r"(?:malignan\w*|cancer\w*|carcinoma\w*|dysplas\w*|neoplas\w*)")
_NEG_NORMAL = re.compile(r"\b(?:not|isn't|is not|doesn't look|does not look|doesn't appear|does not appear)\s+(?:[a-z]+\s+){0,2}?normal\b")
_AFFIRM = re.compile(r"\b(?:polyps?|polypoid|lesions?|adenomas?|adenomatous|mass(?:es)?|growths?|tumou?rs?|neoplasms?|neoplastic)\b")
_OPTION_REF = re.compile(r"\b(?:option|answer|choice)\s*(?:is|:|number|no\.?)?\s*#?\(?([1-7])\)?(?![\d.]\d)")
_BARE_OPTION = re.compile(r"^\W*([1-7])\W*$")
_HEDGE = re.compile(
    r"\b(?:unsure|not sure|uncertain|unclear|inconclusive|indeterminate|"
    r"(?:can ?not|can't|unable to|impossible to|difficult to|hard to|not possible to)\s+"
    r"(?:\w+\s+){0,2}?(?:determine|tell|say|identify|classify|diagnose|provide|assess|be determined|make)|"
    r"i am not able|i'm not able|i cannot|i can't)\b"
)

# Doubt about the answer itself, as opposed to boilerplate disclaimers such as
# "I cannot provide a diagnosis". Overrides a single class mention when classifying.
_STRONG_HEDGE = re.compile(
    r"\b(?:unsure|not sure|not certain|uncertain|unclear|inconclusive|indeterminate|"
    r"(?:can ?not|can't|unable to|impossible to|difficult to|hard to|not possible to)\s+"
    r"(?:\w+\s+){0,2}?(?:determine|tell|say|distinguish|be determined))\b"
)

_OPTION_CLASSES = (
    PathologyClass.NORMAL,
    PathologyClass.ADENOCARCINOMA,
    PathologyClass.TUBULAR_ADENOMA,
    PathologyClass.TUBULOVILLOUS_ADENOMA,
    PathologyClass.VILLOUS_ADENOMA,
    PathologyClass.HYPERPLASTIC_POLYP,
    PathologyClass.INFLAMMATORY_POLYP,
)


def _form_pattern(form: str) -> re.Pattern:
    words = re.split(r"[\s-]+", form.strip().lower())
    body = r"[\s-]+".join(re.escape(w) for w in words)
    return re.compile(r"(?<![a-z])" + body + r"(?:e?s)?(?![a-z])")


def load_synonyms(path: str | Path = SYNONYM_TABLE) -> tuple[tuple[str, PathologyClass], ...]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return tuple((r["surface_form"].strip().lower(), PathologyClass.from_code(r["class"].strip())) for r in rows)


@lru_cache(maxsize=8)
def _compiled(path: str) -> tuple[tuple[re.Pattern, str, Optional[PathologyClass]], ...]:
    pats = [(_NEG_LESION, "class", PathologyClass.NORMAL), (_NEG_MALIGNANCY, "neutral", None),
            (_NEG_NORMAL, "neutral", None), (_AFFIRM, "affirm", None)]
    pats += [(_form_pattern(form), "class", cls) for form, cls in load_synonyms(path)]
    return tuple(pats)


def _normalize(text: str) -> str:
    text = text.lower().replace("’", "'")
    text = re.sub(r"[‐-―]", "-", text)
    return re.sub(r"\s+", " ", text).strip()


@dataclass(frozen=True)
class _Match:
    start: int
    end: int
    kind: str
    cls: Optional[PathologyClass]
    span: str


def find_mentions(raw_text: str, synonyms: str | Path = SYNONYM_TABLE) -> list[_Match]:
    """Non-overlapping matches, longest first, returned in text order."""
    text = _normalize(raw_text)
    candidates = []
    bare = _BARE_OPTION.match(text)
    if bare:
        cls = _OPTION_CLASSES[int(bare.group(1)) - 1]
        candidates.append(_Match(bare.start(), bare.end(), "class", cls, bare.group(0)))
    for m in _OPTION_REF.finditer(text):
        cls = _OPTION_CLASSES[int(m.group(1)) - 1]
        candidates.append(_Match(m.start(), m.end(), "class", cls, m.group(0)))
    for pat, kind, cls in _compiled(str(synonyms)):
        for m in pat.finditer(text):
            candidates.append(_Match(m.start(), m.end(), kind, cls, m.group(0)))
    candidates.sort(key=lambda c: (-(c.end - c.start), c.start))
    taken: list[_Match] = []
    for c in candidates:
        if all(c.end <= t.start or c.start >= t.end for t in taken):
            taken.append(c)
    return sorted(taken, key=lambda c: c.start)


def extract_rules(raw_text: str, task: str, synonyms: str | Path = SYNONYM_TABLE) -> ExtractionOutcome:
    check_task(task)
    if not raw_text or not raw_text.strip():
        return ExtractionOutcome(Category.NEEDS_HUMAN_UNSURE)
    mentions = find_mentions(raw_text, synonyms)
    classes: dict[PathologyClass, str] = {}
    for m in mentions:
        if m.kind == "class":
            classes.setdefault(m.cls, m.span)
    affirm = next((m.span for m in mentions if m.kind == "affirm"), None)
    polyp_classes = [c for c in classes if c.is_polyp]
    has_normal = PathologyClass.NORMAL in classes
    first_span = mentions[0].span if mentions else ""

    def out(category, pathology=None, span=first_span):
        return ExtractionOutcome(category, pathology, "rules", span)

    if task == "classify":
        if len(classes) >= 2:
            return out(Category.NEEDS_HUMAN_MULTIPLE_OR_NONE)
        strong = _STRONG_HEDGE.search(_normalize(raw_text))
        if strong and classes:
            return out(Category.NEEDS_HUMAN_UNSURE, span=strong.group(0))
        if len(polyp_classes) == 1:
            c = polyp_classes[0]
            return out(Category.POLYP_TYPE, c, classes[c])
        if has_normal:
            if affirm:
                return out(Category.NEEDS_HUMAN_MULTIPLE_OR_NONE)
            return out(Category.NO_POLYP, span=classes[PathologyClass.NORMAL])
    else:
        if has_normal:
            if polyp_classes or affirm:
                return out(Category.NEEDS_HUMAN_MULTIPLE_OR_NONE)
            return out(Category.NO_POLYP, span=classes[PathologyClass.NORMAL])
        if len(polyp_classes) == 1:
            c = polyp_classes[0]
            return out(Category.POLYP_TYPE, c, classes[c])
        if polyp_classes or affirm:
            return out(Category.POLYP_DETECTED, span=affirm or first_span)

    hedge = _HEDGE.search(_normalize(raw_text))
    if hedge:
        return out(Category.NEEDS_HUMAN_UNSURE, span=hedge.group(0))
    if task == "classify":
        return out(Category.NEEDS_HUMAN_MULTIPLE_OR_NONE, span=affirm or "")
    return out(Category.NEEDS_HUMAN_UNSURE, span="")


_TASK_DESCRIPTION = {
    "detect": "Decide whether the answer states that a polyp is present in the image.",
    "classify": "Decide which single polyp pathology class the answer selects.",
}


def extraction_prompt(raw_text: str, task: str) -> str:
    check_task(task)
    lines = [
        "You convert a free-text answer about a colonoscopy image into one structured label.",
        _TASK_DESCRIPTION[task],
        "Answer to label:",
        "<<<",
        raw_text,
        ">>>",
        "Choose exactly one category:",
    ]
    lines += [f"{c.number}. {CATEGORY_DESCRIPTIONS[c]}" for c in Category]
    lines += [
        "Allowed polyp_type values: adenocarcinoma, tubular adenoma, tubulovillous adenoma, "
        "villous adenoma, hyperplastic polyp, inflammatory polyp.",
        'Reply with JSON only: {"category": <1-5>, "polyp_type": <string or null>}',
    ]
    return "\n".join(lines)


class _LlmLabel(BaseModel):
    category: list[int]
    polyp_type: Optional[str] = None

    @field_validator("category", mode="before")
    @classmethod
    def _categories(cls, v):
        if isinstance(v, bool) or v is None:
            raise ValueError("category missing")
        items = v if isinstance(v, list) else [v]
        found = []
        for item in items:
            if isinstance(item, int) and not isinstance(item, bool):
                found.append(item)
            elif isinstance(item, str):
                found += [int(d) for d in re.findall(r"(?<!\d)([1-5])(?!\d)", item)]
                if not re.search(r"\d", item):
                    found += [c.number for c in Category if c.value.lower() == item.strip().lower()]
        found = sorted(set(found))
        if not found or any(not 1 <= n <= 5 for n in found):
            raise ValueError(f"unusable category {v!r}")
        return found


def parse_llm_reply(reply: str) -> ExtractionOutcome:
    def unsure(span=""):
        return ExtractionOutcome(Category.NEEDS_HUMAN_UNSURE, None, "llm", span)

    m = re.search(r"\{.*\}", reply, flags=re.S)
    if not m:
        return unsure()
    try:
        label = _LlmLabel.model_validate(json.loads(m.group(0)))
    except (json.JSONDecodeError, ValidationError):
        return unsure(m.group(0))
    span = m.group(0)
    if len(label.category) > 1:
        return ExtractionOutcome(Category.NEEDS_HUMAN_MULTIPLE_OR_NONE, None, "llm", span)
    category = list(Category)[label.category[0] - 1]
    if category is not Category.POLYP_TYPE:
        return ExtractionOutcome(category, None, "llm", span)
    named = {x.cls for x in find_mentions(label.polyp_type or "") if x.kind == "class"}
    code = (label.polyp_type or "").strip().upper()
    if not named and code in POLYP_CODES:
        named = {PathologyClass(code)}
    if len(named) != 1 or not next(iter(named)).is_polyp:
        return unsure(span)
    return ExtractionOutcome(Category.POLYP_TYPE, named.pop(), "llm", span)


def extract_llm(
    backend: Backend,
    raw_text: str,
    task: str,
    cache: Optional[ResponseCache] = None,
) -> ExtractionOutcome:
    conv = Conversation((Turn(extraction_prompt(raw_text, task)),))
    response = cached_complete(cache, backend, conv, EXTRACTION_PARAMS)
    return parse_llm_reply(response.raw_text)


def extract(
    raw_text: str,
    task: str,
    llm_backend: Optional[Backend] = None,
    cache: Optional[ResponseCache] = None,
) -> ExtractionOutcome:
    outcome = extract_rules(raw_text, task)
    if outcome.category is Category.NEEDS_HUMAN_UNSURE and llm_backend is not None and raw_text.strip():
        return extract_llm(llm_backend, raw_text, task, cache)
    return outcome


def to_task_label(outcome: ExtractionOutcome, task: str) -> str:
    check_task(task)
    cat = outcome.category
    if task == "detect":
        if cat in (Category.POLYP_TYPE, Category.POLYP_DETECTED):
            return POLYP
        if cat is Category.NO_POLYP:
            return NORMAL
        return NO_ANSWER
    if cat is Category.POLYP_TYPE:
        return outcome.pathology.code
    if cat is Category.NO_POLYP:
        return NORMAL
    if cat is Category.NEEDS_HUMAN_MULTIPLE_OR_NONE:
        return TWO_OPTIONS
    return NO_ANSWER


@dataclass(frozen=True)
class AuditItem:
    id: str
    raw_text: str
    outcome: ExtractionOutcome


def sample_for_audit(results: Sequence, n: int, seed: int) -> list:
    if n < 0 or n > len(results):
        raise ValueError(f"cannot sample {n} items from {len(results)} results")
    return random.Random(seed).sample(list(results), n)


def export_audit(items: Iterable[AuditItem], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "raw_text", "category", "pathology"])
        for item in items:
            o = item.outcome
            w.writerow([item.id, item.raw_text, o.category.value, o.pathology.code if o.pathology else ""])
    return path
