"""Image manifests: loading, exp0 split, filename anonymization, class support."""

from __future__ import annotations

import csv
import logging
import math
import random
import shutil
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from PIL import Image

from .labels import CLASS_CODES, PathologyClass

log = logging.getLogger(__name__)

MANIFEST_HEADER = ("id", "file", "presence", "class")
SPLIT_TAGS = ("exp0", "main", "unassigned")
HEX_NAME_LENGTH = 10
_MAX_NAME_ATTEMPTS = 5


class ManifestError(ValueError):
    pass


class AnonymizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ImageRecord:
    id: str
    file_path: Path
    presence: bool
    pathology: PathologyClass
    width: int = 0
    height: int = 0

    def __post_init__(self):
        if self.presence != self.pathology.is_polyp:
            raise ManifestError(
                f"record {self.id!r}: presence={int(self.presence)} inconsistent with class {self.pathology.code}"
            )


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ImageRecord, ...] = ()
    splits: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise ManifestError(f"duplicate id {r.id!r}")
            seen.add(r.id)
        bad = {t for t in self.splits.values() if t not in SPLIT_TAGS}
        if bad:
            raise ManifestError(f"unknown split tags {sorted(bad)}")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def split_of(self, record_id: str) -> str:
        return self.splits.get(record_id, "unassigned")

    def filter_split(self, split: str) -> "DatasetManifest":
        """Restrict to one split tag; ``"all"`` returns the manifest unchanged."""
        if split == "all":
            return self
        if split not in SPLIT_TAGS:
            raise ValueError(f"split must be 'all' or one of {SPLIT_TAGS}, got {split!r}")
        keep = tuple(r for r in self.records if self.split_of(r.id) == split)
        return DatasetManifest(keep, {r.id: split for r in keep})

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.id: r for r in self.records}


def _parse_presence(value: str, lineno: int) -> bool:
    v = value.strip()
    if v not in ("0", "1"):
        raise ManifestError(f"row {lineno}: presence must be 0 or 1, got {value!r}")
    return v == "1"


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read a ``id,file,presence,class`` CSV.

    Relative ``file`` entries resolve against the manifest's directory. An
    optional ``split`` column restores tags written by :func:`save_manifest`.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return DatasetManifest()
        header = [h.strip() for h in header]
        if tuple(header[:4]) != MANIFEST_HEADER:
            raise ManifestError(f"row 1: header must start with {','.join(MANIFEST_HEADER)}, got {','.join(header)}")
        has_split = len(header) > 4 and header[4] == "split"
        records, splits, seen = [], {}, set()
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 4:
                raise ManifestError(f"row {lineno}: expected 4 fields, got {len(row)}")
            rid, file_, presence, code = (c.strip() for c in row[:4])
            if not rid:
                raise ManifestError(f"row {lineno}: empty id")
            if rid in seen:
                raise ManifestError(f"row {lineno}: duplicate id {rid!r}")
            seen.add(rid)
            try:
                pathology = PathologyClass.from_code(code)
            except ValueError:
                raise ManifestError(
                    f"row {lineno}: unknown class code {code!r}; legal codes are {', '.join(CLASS_CODES)}"
                ) from None
            fpath = Path(file_)
            if not fpath.is_absolute():
                fpath = base / fpath
            if not fpath.is_file():
                raise ManifestError(f"row {lineno}: image file not found: {fpath}")
            try:
                with Image.open(fpath) as im:
                    width, height = im.size
            except OSError as exc:
                raise ManifestError(f"row {lineno}: unreadable image {fpath}: {exc}") from None
            try:
                records.append(ImageRecord(rid, fpath, _parse_presence(presence, lineno), pathology, width, height))
            except ManifestError as exc:
                raise ManifestError(f"row {lineno}: {exc}") from None
            if has_split and len(row) > 4 and row[4].strip():
                splits[rid] = row[4].strip()
    return DatasetManifest(tuple(records), splits)


def save_manifest(m: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER + ("split",))
        for r in m.records:
            w.writerow([r.id, str(r.file_path), int(r.presence), r.pathology.code, m.split_of(r.id)])
    return path


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def _allocate(total: int, sizes: list[int]) -> list[int]:
    # Largest-remainder apportionment; ties go to the earlier stratum.
    n = sum(sizes)
    quotas = [total * s / n for s in sizes]
    alloc = [int(math.floor(q + 1e-9)) for q in quotas]
    order = sorted(range(len(sizes)), key=lambda i: (-(quotas[i] - alloc[i]), i))
    for i in order[: total - sum(alloc)]:
        alloc[i] += 1
    # Both splits should see every stratum that has at least two members.
    for i, s in enumerate(sizes):
        if s >= 2 and alloc[i] == 0:
            donor = max((j for j in range(len(sizes)) if alloc[j] > 1), key=lambda j: alloc[j], default=None)
            if donor is not None:
                alloc[donor] -= 1
                alloc[i] += 1
        if s >= 2 and alloc[i] == s:
            taker = min((j for j in range(len(sizes)) if alloc[j] < sizes[j] - 1 and j != i),
                        key=lambda j: alloc[j], default=None)
            if taker is not None:
                alloc[i] -= 1
                alloc[taker] += 1
    return alloc


def split_dataset(m: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """Tag ``round(fraction * N)`` records as ``exp0`` and the rest ``main``.

    Stratified by presence: each stratum is shuffled with its own seeded
    generator and its allocated prefix goes to ``exp0``.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    if len(m) == 0:
        raise ValueError("cannot split an empty manifest")
    total = _round_half_up(fraction * len(m))
    strata = [[r.id for r in m.records if r.presence], [r.id for r in m.records if not r.presence]]
    strata = [s for s in strata if s]
    alloc = _allocate(total, [len(s) for s in strata])
    rng = np.random.default_rng(seed)
    tags = {}
    for ids, k in zip(strata, alloc):
        perm = rng.permutation(len(ids))
        for rank, idx in enumerate(perm):
            tags[ids[idx]] = "exp0" if rank < k else "main"
    return DatasetManifest(m.records, tags)


def _leaks(name: str, stem: str) -> bool:
    low, stem = name.lower(), stem.lower()
    if stem and (stem in low or low in stem):
        return True
    return any(code.lower() in low for code in CLASS_CODES)


def anonymize_filenames(
    m: DatasetManifest,
    out_dir: str | Path,
    seed: int,
    mapping_path: str | Path | None = None,
) -> DatasetManifest:
    """Copy every image to ``out_dir`` under a seeded random hex name.

    Writes an ``old,new`` mapping CSV (default ``out_dir/mapping.csv``). On any
    copy failure the files already copied are removed and
    :class:`AnonymizationError` is raised.
    """
    out_dir = Path(out_dir)
    rng = random.Random(seed)
    used: set[str] = set()
    plan: list[tuple[ImageRecord, Path]] = []
    for r in m.records:
        for _ in range(_MAX_NAME_ATTEMPTS):
            name = f"{rng.getrandbits(4 * HEX_NAME_LENGTH):0{HEX_NAME_LENGTH}x}"
            if name not in used and not _leaks(name, r.file_path.stem):
                break
        else:
            raise AnonymizationError(f"could not draw a unique, non-leaking name for {r.id!r}")
        used.add(name)
        plan.append((r, out_dir / f"{name}{r.file_path.suffix.lower()}"))

    copied: list[Path] = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for r, dest in plan:
            shutil.copyfile(r.file_path, dest)
            copied.append(dest)
        mapping_path = Path(mapping_path) if mapping_path else out_dir / "mapping.csv"
        with mapping_path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["old", "new"])
            for r, dest in plan:
                w.writerow([str(r.file_path), str(dest)])
    except OSError as exc:
        for p in copied:
            p.unlink(missing_ok=True)
        raise AnonymizationError(f"copy failed: {exc}") from exc

    records = tuple(replace(r, file_path=dest) for r, dest in plan)
    return DatasetManifest(records, dict(m.splits))


def class_support(m: DatasetManifest | Iterable[ImageRecord]) -> dict[PathologyClass, int]:
    counts = Counter(r.pathology for r in m)
    return {c: counts.get(c, 0) for c in PathologyClass}
