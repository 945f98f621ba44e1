"""Pathology classes and the task label vocabulary shared across modules."""

from __future__ import annotations

from enum import Enum


class PathologyClass(str, Enum):
    NORMAL = "Normal"
    ADENOCARCINOMA = "AC"
    TUBULAR_ADENOMA = "TA"
    TUBULOVILLOUS_ADENOMA = "TVA"
    VILLOUS_ADENOMA = "VA"
    HYPERPLASTIC_POLYP = "HP"
    INFLAMMATORY_POLYP = "IP"

    @property
    def code(self) -> str:
        return self.value

    @property
    def full_name(self) -> str:
        return _FULL_NAMES[self]

    @property
    def is_polyp(self) -> bool:
        return self is not PathologyClass.NORMAL

    @classmethod
    def from_code(cls, code: str) -> "PathologyClass":
        try:
            return cls(code)
        except ValueError:
            raise ValueError(
                f"unknown class code {code!r}; expected one of {', '.join(CLASS_CODES)}"
            ) from None


_FULL_NAMES = {
    PathologyClass.NORMAL: "Normal",
    PathologyClass.ADENOCARCINOMA: "Adenocarcinoma",
    PathologyClass.TUBULAR_ADENOMA: "Tubular Adenoma",
    PathologyClass.TUBULOVILLOUS_ADENOMA: "Tubulovillous Adenoma",
    PathologyClass.VILLOUS_ADENOMA: "Villous Adenoma",
    PathologyClass.HYPERPLASTIC_POLYP: "Hyperplastic Polyp",
    PathologyClass.INFLAMMATORY_POLYP: "Inflammatory Polyp",
}

CLASS_CODES: tuple[str, ...] = tuple(c.value for c in PathologyClass)
POLYP_CLASSES: tuple[PathologyClass, ...] = tuple(c for c in PathologyClass if c.is_polyp)
POLYP_CODES: tuple[str, ...] = tuple(c.value for c in POLYP_CLASSES)

# Task labels. Classification labels are the class codes plus the two flags.
POLYP = "Polyp"
NORMAL = "Normal"
NO_ANSWER = "No-A"
TWO_OPTIONS = "2OP"

DETECT_LABELS: tuple[str, ...] = (POLYP, NORMAL, NO_ANSWER)
CLASSIFY_LABELS: tuple[str, ...] = POLYP_CODES + (NORMAL, NO_ANSWER, TWO_OPTIONS)

TASKS = ("detect", "classify")


def check_task(task: str) -> str:
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    return task
