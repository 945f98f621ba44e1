"""Published confusion-count fixtures and their arithmetic re-verification."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .labels import POLYP_CODES
from .metrics import ConfusionCounts, f1, relative_change, weighted_f1

DATA_DIR = Path(__file__).with_name("data")
COUNTS_FIXTURE = DATA_DIR / "counts_fixture.csv"
PROMPT_CHANGE_FIXTURE = DATA_DIR / "prompt_change_fixture.csv"

COUNTS_COLUMNS = ("model", "task_or_class", "tp", "fp", "tn", "fn", "reported_f1")
DETECTION = "detection"
WEIGHTED = "weighted"


class FixtureError(ValueError):
    pass


@dataclass(frozen=True)
class FixtureRow:
    model: str
    item: str
    counts: Optional[ConfusionCounts]
    reported: float
    expected_delta: Optional[float] = None
    line: int = 0


@dataclass(frozen=True)
class Check:
    model: str
    item: str
    computed: float
    reported: float
    tolerance: float
    expected_delta: Optional[float] = None

    @property
    def delta(self) -> float:
        return self.computed - self.reported

    @property
    def known_discrepancy(self) -> bool:
        return self.expected_delta is not None

    @property
    def ok(self) -> bool:
        target = self.expected_delta or 0.0
        return abs(self.delta - target) <= self.tolerance + 1e-12


def _int(value: str, line: int, col: str) -> int:
    try:
        v = int(value)
    except ValueError:
        raise FixtureError(f"line {line}: {col} must be an integer, got {value!r}") from None
    if v < 0:
        raise FixtureError(f"line {line}: {col} must be non-negative")
    return v


def _float(value: str, line: int, col: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise FixtureError(f"line {line}: {col} must be a number, got {value!r}") from None


def load_counts(path: str | Path = COUNTS_FIXTURE) -> list[FixtureRow]:
    path = Path(path)
    if not path.is_file():
        raise FixtureError(f"fixture not found: {path}")
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not set(COUNTS_COLUMNS) <= set(reader.fieldnames):
            raise FixtureError(f"fixture header must contain {','.join(COUNTS_COLUMNS)}")
        for line, r in enumerate(reader, start=2):
            item = (r["task_or_class"] or "").strip()
            if item not in (DETECTION, WEIGHTED) + POLYP_CODES:
                raise FixtureError(f"line {line}: unknown task_or_class {item!r}")
            counts = None
            if item != WEIGHTED:
                counts = ConfusionCounts(*(_int(r[c], line, c) for c in ("tp", "fp", "tn", "fn")))
            ed = (r.get("expected_delta") or "").strip()
            rows.append(FixtureRow(
                r["model"].strip(), item, counts, _float(r["reported_f1"], line, "reported_f1"),
                _float(ed, line, "expected_delta") if ed else None, line,
            ))
    return rows


def verify_counts(
    rows: list[FixtureRow],
    f1_tol: float = 0.005,
    weighted_tol: float = 0.005,
    honor_known: bool = True,
) -> list[Check]:
    """Recompute every row's F1 and each model's support-weighted F1."""
    checks = []
    models: dict[str, dict[str, FixtureRow]] = {}
    for row in rows:
        models.setdefault(row.model, {})[row.item] = row
    for model, items in models.items():
        for item in (DETECTION,) + POLYP_CODES:
            row = items.get(item)
            if row is None:
                continue
            checks.append(Check(model, item, f1(row.counts), row.reported, f1_tol,
                                row.expected_delta if honor_known else None))
        wrow = items.get(WEIGHTED)
        if wrow is not None:
            missing = [c for c in POLYP_CODES if c not in items]
            if missing:
                raise FixtureError(f"{model}: weighted row needs class rows {missing}")
            per_class = {c: f1(items[c].counts) for c in POLYP_CODES}
            supports = {c: items[c].counts.support for c in POLYP_CODES}
            checks.append(Check(model, WEIGHTED, weighted_f1(per_class, supports), wrow.reported,
                                weighted_tol, wrow.expected_delta if honor_known else None))
    return checks


@dataclass(frozen=True)
class PromptComparisonRow:
    backend: str
    task: str
    f1_simple: float
    f1_engineered: float
    reported_change: Optional[float]

    @property
    def change(self) -> Optional[float]:
        return relative_change(self.f1_simple, self.f1_engineered)


def load_prompt_changes(path: str | Path = PROMPT_CHANGE_FIXTURE) -> list[PromptComparisonRow]:
    rows = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for line, r in enumerate(csv.DictReader(fh), start=2):
            rep = r["reported_change"].strip()
            rows.append(PromptComparisonRow(
                r["backend"].strip(), r["task"].strip(),
                _float(r["f1_simple"], line, "f1_simple"), _float(r["f1_engineered"], line, "f1_engineered"),
                None if rep.upper() == "NA" else _float(rep.rstrip("%"), line, "reported_change"),
            ))
    return rows
