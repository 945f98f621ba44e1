"""Experiment runs: manifest x backend x prompt template, persisted incrementally."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Optional

from . import prompts
from .backends import (
    PRESETS,
    AuthError,
    Backend,
    BackendError,
    Conversation,
    NetworkError,
    ResponseCache,
    RunLedger,
    Turn,
    build_backend,
    converse,
    load_backend,
    load_backend_config,
)
from .dataset import DatasetManifest, ImageRecord, load_manifest, split_dataset
from .extraction import ExtractionOutcome, extract, to_task_label
from .labels import PathologyClass
from .metrics import binary_counts, f1, one_vs_all, relative_change
from .preprocess import load_image, resize_standard
from .tilense import encode_png

log = logging.getLogger(__name__)

TASK_MODES = ("detect", "classify", "both")
CACHE_MODES = ("off", "read_write", "replay")
EXP0_FRACTION = 0.15


class ConfigError(ValueError):
    pass


class BackendsUnreachable(RuntimeError):
    pass


@dataclass
class RunConfig:
    manifest: Path
    backends: list[str]
    templates: list[str]
    seed: int
    task: str = "both"
    preset: str = "evaluation"
    split: str = "all"
    concurrency: int = 1
    cache_mode: str = "read_write"
    cache_dir: Optional[Path] = None
    out_dir: Path = Path("run_out")
    backend_configs: dict[str, str] = field(default_factory=dict)
    extraction_backend: Optional[str] = None
    chat_reuse: bool = True
    resize: bool = False
    exp0_fraction: float = EXP0_FRACTION
    audit_sample: int = 50

    def __post_init__(self):
        self.manifest = Path(self.manifest)
        self.out_dir = Path(self.out_dir)
        if self.cache_dir is not None:
            self.cache_dir = Path(self.cache_dir)
        self.validate()

    def validate(self) -> None:
        if not self.backends:
            raise ConfigError("config needs at least one backend")
        if not self.templates:
            raise ConfigError("config needs at least one prompt template")
        for t in self.templates:
            if t not in prompts.TEMPLATE_IDS:
                raise ConfigError(f"unknown template {t!r}; registered ids: {', '.join(prompts.TEMPLATE_IDS)}")
            if self.task == "classify" and t.endswith("_detect"):
                raise ConfigError(f"template {t!r} cannot serve the classify task")
        if self.task not in TASK_MODES:
            raise ConfigError(f"task must be one of {TASK_MODES}, got {self.task!r}")
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {tuple(PRESETS)}, got {self.preset!r}")
        if self.split not in ("exp0", "main", "all"):
            raise ConfigError(f"split must be exp0, main or all, got {self.split!r}")
        if self.cache_mode not in CACHE_MODES:
            raise ConfigError(f"cache_mode must be one of {CACHE_MODES}, got {self.cache_mode!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed must be an integer")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = {"manifest", "backends", "templates", "seed"} - set(d)
        if missing:
            raise ConfigError(f"config missing keys: {sorted(missing)}")
        d = dict(d)
        if base_dir is not None:
            for key in ("manifest", "out_dir", "cache_dir"):
                if d.get(key) is not None and not Path(d[key]).is_absolute():
                    d[key] = base_dir / d[key]
            d["backend_configs"] = {
                k: str(v if Path(v).is_absolute() else base_dir / v) for k, v in d.get("backend_configs", {}).items()
            }
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(data, base_dir=path.parent)

    def config_hash(self) -> str:
        """Hash of the fields that change results; paths and concurrency excluded."""
        keys = ("backends", "templates", "task", "preset", "split", "seed", "chat_reuse", "resize",
                "exp0_fraction", "extraction_backend")
        blob = json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class ResultRow:
    image_id: str
    backend_id: str
    template_id: str
    truth_presence: bool
    truth_class: str
    status: str = "ok"
    error: str = ""
    digests: list[str] = field(default_factory=list)
    raw_texts: list[str] = field(default_factory=list)
    cache_hits: list[bool] = field(default_factory=list)
    detect: Optional[ExtractionOutcome] = None
    detect_label: Optional[str] = None
    classify: Optional[ExtractionOutcome] = None
    classify_label: Optional[str] = None
    config_hash: str = ""

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.image_id, self.backend_id, self.template_id)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["detect"] = self.detect.to_dict() if self.detect else None
        d["classify"] = self.classify.to_dict() if self.classify else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ResultRow":
        d = dict(d)
        d["detect"] = ExtractionOutcome.from_dict(d["detect"]) if d.get("detect") else None
        d["classify"] = ExtractionOutcome.from_dict(d["classify"]) if d.get("classify") else None
        return cls(**d)


@dataclass
class RunResult:
    rows: list[ResultRow]
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def ok_rows(self) -> list[ResultRow]:
        return [r for r in self.rows if r.status == "ok"]

    def select(self, backend_id: Optional[str] = None, template_id: Optional[str] = None,
               templates: Optional[Iterable[str]] = None) -> "RunResult":
        keep = set(templates) if templates is not None else None
        rows = [r for r in self.rows
                if (backend_id is None or r.backend_id == backend_id)
                and (template_id is None or r.template_id == template_id)
                and (keep is None or r.template_id in keep)]
        return RunResult(rows, dict(self.metadata))

    def by_protocol(self) -> dict[str, "RunResult"]:
        protocols = sorted({r.template_id.split("_", 1)[0] for r in self.rows})
        return {p: RunResult([r for r in self.rows if r.template_id.startswith(p + "_")], dict(self.metadata))
                for p in protocols}

    def write_jsonl(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            for row in sorted(self.rows, key=lambda r: r.key):
                fh.write(json.dumps(row.to_dict(), sort_keys=True) + "\n")
        os.replace(tmp, path)
        return path

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "RunResult":
        path = Path(path)
        latest: dict[tuple, ResultRow] = {}
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                row = ResultRow.from_dict(json.loads(line))
                latest[row.key] = row
        meta_path = path.with_name("run_meta.json")
        meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
        return cls(sorted(latest.values(), key=lambda r: r.key), meta)


def _image_payload(record: ImageRecord, resize: bool):
    if not resize:
        return record.file_path
    return encode_png(resize_standard(load_image(record.file_path)))


def _conversations(template: prompts.PromptTemplate, image, task: str, chat_reuse: bool):
    """Chats to send for one row, and which reply index feeds detect/classify."""
    conv = prompts.render(template, image)
    if len(conv.turns) == 1:
        return [conv], 0, None
    if task == "detect":
        return [Conversation(conv.turns[:1])], 0, None
    if chat_reuse:
        return [conv], 0, 1
    second = Conversation((Turn(conv.turns[1].text, image),))
    return [Conversation(conv.turns[:1]), second], 0, 1


def evaluate_row(
    record: ImageRecord,
    backend: Backend,
    template_id: str,
    cfg: RunConfig,
    cache: Optional[ResponseCache] = None,
    llm_backend: Optional[Backend] = None,
) -> ResultRow:
    row = ResultRow(record.id, backend.backend_id, template_id, record.presence, record.pathology.code,
                    config_hash=cfg.config_hash())
    params = PRESETS[cfg.preset]
    template = prompts.get_template(template_id)
    try:
        image = _image_payload(record, cfg.resize)
        chats, detect_idx, classify_idx = _conversations(template, image, cfg.task, cfg.chat_reuse)
        responses = []
        for conv in chats:
            responses += converse(backend, conv, params, cache, replay=cfg.cache_mode == "replay")
        row.digests = [r.request_digest for r in responses]
        row.raw_texts = [r.raw_text for r in responses]
        row.cache_hits = [r.cache_hit for r in responses]
        if cfg.task in ("detect", "both"):
            row.detect = extract(row.raw_texts[detect_idx], "detect", llm_backend, cache)
            row.detect_label = to_task_label(row.detect, "detect")
        if cfg.task in ("classify", "both") and classify_idx is not None:
            row.classify = extract(row.raw_texts[classify_idx], "classify", llm_backend, cache)
            row.classify_label = to_task_label(row.classify, "classify")
    except (BackendError, OSError, ValueError) as exc:
        row.status = "failed"
        row.error = f"{type(exc).__name__}: {exc}"
        log.warning("row %s failed: %s", row.key, row.error)
    return row


def prepare_manifest(cfg: RunConfig) -> DatasetManifest:
    manifest = load_manifest(cfg.manifest)
    if cfg.split != "all":
        if not manifest.splits:
            manifest = split_dataset(manifest, cfg.exp0_fraction, cfg.seed)
        manifest = manifest.filter_split(cfg.split)
    return manifest


def resolve_backend(spec: str, cfg: RunConfig, ledger: RunLedger) -> Backend:
    try:
        if spec in cfg.backend_configs:
            path = Path(cfg.backend_configs[spec])
            return build_backend(load_backend_config(path), ledger=ledger, base_dir=path.parent)
        return load_backend(spec, ledger=ledger)
    except ValueError as exc:
        raise ConfigError(f"backend {spec!r}: {exc}") from None


def run_evaluation(
    cfg: RunConfig,
    backends: Optional[dict[str, Backend]] = None,
    ledger: Optional[RunLedger] = None,
    llm_backend: Optional[Backend] = None,
) -> RunResult:
    """Evaluate every (image, backend, template) triple.

    Each finished row is appended to ``out_dir/results.jsonl`` straight away;
    rows already present with status ok for the same config hash are skipped,
    so an interrupted run resumes where it stopped. Failed rows are recorded
    and retried on the next run.
    """
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    ledger = ledger or RunLedger(out_dir / "ledger.jsonl")
    manifest = prepare_manifest(cfg)
    if backends is None:
        backends = {spec: resolve_backend(spec, cfg, ledger) for spec in cfg.backends}
    for b in backends.values():
        if b.ledger is None:
            b.ledger = ledger
    if llm_backend is None and cfg.extraction_backend:
        llm_backend = resolve_backend(cfg.extraction_backend, cfg, ledger)
    cache = None
    if cfg.cache_mode != "off":
        cache = ResponseCache(cfg.cache_dir or out_dir / "cache")

    results_path = out_dir / "results.jsonl"
    chash = cfg.config_hash()
    done: dict[tuple, ResultRow] = {}
    if results_path.exists():
        for row in RunResult.read_jsonl(results_path).rows:
            if row.status == "ok" and row.config_hash == chash:
                done[row.key] = row

    meta = {"config_hash": chash, "started": datetime.now(timezone.utc).isoformat(timespec="seconds")}
    todo = [(rec, b, t) for rec in manifest.records for b in backends.values() for t in cfg.templates
            if (rec.id, b.backend_id, t) not in done]
    log.info("%d rows to evaluate, %d already done", len(todo), len(done))

    lock = threading.Lock()
    fresh: list[ResultRow] = []

    def work(job):
        rec, backend, template_id = job
        row = evaluate_row(rec, backend, template_id, cfg, cache, llm_backend)
        with lock:
            fresh.append(row)
            with results_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(row.to_dict(), sort_keys=True) + "\n")
        return row

    if cfg.concurrency > 1:
        with ThreadPoolExecutor(max_workers=cfg.concurrency) as pool:
            list(pool.map(work, todo))
    else:
        for job in todo:
            work(job)

    if fresh and all(r.status == "failed" for r in fresh):
        unreachable = [r for r in fresh if r.error.split(":", 1)[0] in _UNREACHABLE]
        if len(unreachable) == len(fresh):
            raise BackendsUnreachable(f"all {len(fresh)} requests failed: {fresh[0].error}")

    merged = dict(done)
    for row in fresh:
        merged[row.key] = row
    meta["finished"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    meta["rows"] = len(merged)
    meta["failed"] = sum(r.status == "failed" for r in merged.values())
    result = RunResult(sorted(merged.values(), key=lambda r: r.key), meta)
    result.write_jsonl(results_path)
    (out_dir / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return result


_UNREACHABLE = {cls.__name__ for cls in (NetworkError, AuthError)} | {
    c.__name__ for c in NetworkError.__subclasses__()
}


def detection_f1(result: RunResult) -> float:
    rows = [r for r in result.ok_rows if r.detect_label is not None]
    return f1(binary_counts([r.detect_label for r in rows], [r.truth_presence for r in rows]))


def classification_weighted_f1(result: RunResult) -> Optional[float]:
    rows = [r for r in result.ok_rows if r.classify_label is not None]
    if not rows:
        return None
    report = one_vs_all([r.classify_label for r in rows], [PathologyClass(r.truth_class) for r in rows])
    return report.weighted_f1


@dataclass(frozen=True)
class PromptComparison:
    backend_id: str
    task: str
    f1_simple: float
    f1_engineered: float

    @property
    def change(self) -> Optional[float]:
        return relative_change(self.f1_simple, self.f1_engineered)


def compare_prompts(
    r_simple: RunResult,
    r_engineered: RunResult,
    common_only: bool = False,
) -> list[PromptComparison]:
    """Per backend and task: F1 under each protocol and the relative change.

    Only ok rows count. Both runs must cover the same images unless
    ``common_only`` is set, which restricts each side to the shared images.
    """
    out = []
    simple, eng = RunResult(r_simple.ok_rows), RunResult(r_engineered.ok_rows)
    backends = sorted({r.backend_id for r in simple.rows} | {r.backend_id for r in eng.rows})
    for b in backends:
        s, e = simple.select(backend_id=b), eng.select(backend_id=b)
        ids_s, ids_e = {r.image_id for r in s.rows}, {r.image_id for r in e.rows}
        if ids_s != ids_e:
            if not common_only:
                raise ValueError(f"backend {b}: simple and engineered runs cover different images "
                                 f"({len(ids_s ^ ids_e)} differ)")
            shared = ids_s & ids_e
            log.warning("backend %s: comparing prompts on %d shared images", b, len(shared))
            s = RunResult([r for r in s.rows if r.image_id in shared])
            e = RunResult([r for r in e.rows if r.image_id in shared])
            if not shared:
                continue
        if any(r.detect_label is not None for r in s.rows) and any(r.detect_label is not None for r in e.rows):
            out.append(PromptComparison(b, "detect", detection_f1(s), detection_f1(e)))
        ws, we = classification_weighted_f1(s), classification_weighted_f1(e)
        if ws is not None and we is not None:
            out.append(PromptComparison(b, "classify", ws, we))
    return out
