"""Metric tables, confusion matrices, ROC points and prompt comparisons for a run."""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .labels import DETECT_LABELS, POLYP, PathologyClass  # noqa: E402
from .metrics import (  # noqa: E402
    MulticlassReport,
    auroc_from_scores,
    binary_counts,
    f1,
    format_change,
    one_vs_all,
    point_auroc,
)
from .runner import PromptComparison, ResultRow, RunResult, compare_prompts  # noqa: E402

METRIC_COLUMNS = ("backend", "template", "task", "n", "tp", "fp", "tn", "fn", "f1", "weighted_f1",
                  "point_auroc", "score_auroc")
TRUTH_DETECT = ("Polyp", "Normal")


def slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "-", text).strip("-") or "x"


def _groups(result: RunResult) -> list[tuple[str, str, list[ResultRow]]]:
    keys = sorted({(r.backend_id, r.template_id) for r in result.ok_rows})
    return [(b, t, [r for r in result.ok_rows if r.backend_id == b and r.template_id == t]) for b, t in keys]


def detection_matrix(rows: list[ResultRow]) -> np.ndarray:
    """Rows = predicted label (Polyp, Normal, No-A); columns = truth (Polyp, Normal)."""
    m = np.zeros((len(DETECT_LABELS), 2), dtype=int)
    for r in rows:
        m[DETECT_LABELS.index(r.detect_label), 0 if r.truth_presence else 1] += 1
    return m


def _point_auroc(c) -> Optional[float]:
    return point_auroc(c) if c.tp + c.fn and c.tn + c.fp else None


def detection_metrics(rows: list[ResultRow]) -> dict:
    preds = [r.detect_label for r in rows]
    truths = [r.truth_presence for r in rows]
    counts = binary_counts(preds, truths)
    out = {"n": len(rows), **counts.to_dict(), "f1": f1(counts), "point_auroc": _point_auroc(counts)}
    # Labels give a single operating point, so the trapezoid over {0, 1}
    # scores reduces to the point estimate; kept as a cross-check.
    scores = [1.0 if p == POLYP else 0.0 for p in preds]
    out["score_auroc"] = auroc_from_scores(scores, truths) if 0 < sum(truths) < len(truths) else None
    return out


def detection_roc_points(rows: list[ResultRow]) -> list[list[float]]:
    c = binary_counts([r.detect_label for r in rows], [r.truth_presence for r in rows])
    fpr = c.fp / (c.fp + c.tn) if c.fp + c.tn else 0.0
    return [[0.0, 0.0], [fpr, c.sensitivity], [1.0, 1.0]]


def classification_report(rows: list[ResultRow]) -> MulticlassReport:
    return one_vs_all([r.classify_label for r in rows], [PathologyClass(r.truth_class) for r in rows])


@dataclass
class ReportBundle:
    out_dir: Path
    metrics: dict = field(default_factory=dict)
    comparisons: list[PromptComparison] = field(default_factory=list)
    files: list[Path] = field(default_factory=list)

    def index(self) -> dict:
        return {"files": sorted(str(p.relative_to(self.out_dir)) for p in self.files)}


def _write_csv(path: Path, header: Iterable[str], rows: Iterable[Iterable]) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        w.writerows(rows)
    return path


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _matrix_png(matrix: np.ndarray, row_labels, col_labels, title: str, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(1.2 + 0.8 * len(col_labels), 1.0 + 0.6 * len(row_labels)), dpi=100)
    ax.imshow(matrix, cmap="Blues", aspect="auto")
    ax.set_xticks(range(len(col_labels)), labels=list(col_labels))
    ax.set_yticks(range(len(row_labels)), labels=list(row_labels))
    ax.set_xlabel("true")
    ax.set_ylabel("predicted")
    ax.set_title(title, fontsize=9)
    peak = matrix.max() if matrix.size else 0
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            ax.text(j, i, str(matrix[i, j]), ha="center", va="center",
                    color="white" if peak and matrix[i, j] > peak / 2 else "black", fontsize=8)
    fig.tight_layout()
    # No software/date metadata so regenerated files are byte-identical.
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def build_report(
    result: RunResult,
    out_dir: str | Path,
    plots: bool = True,
    tilense_dir: Optional[str | Path] = None,
) -> ReportBundle:
    """Write every report artifact for ``result`` into ``out_dir``.

    Output depends only on the rows, so regenerating from the same results
    file gives identical bytes.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle = ReportBundle(out_dir)
    table = []
    roc: dict[str, dict] = {}
    for backend, template, rows in _groups(result):
        key = f"{backend}/{template}"
        entry: dict = {"backend": backend, "template": template, "n_rows": len(rows)}
        stem = f"{slug(backend)}__{slug(template)}"
        det_rows = [r for r in rows if r.detect_label is not None]
        if det_rows:
            d = detection_metrics(det_rows)
            entry["detect"] = d
            table.append([backend, template, "detect", d["n"], d["tp"], d["fp"], d["tn"], d["fn"], d["f1"],
                          None, d["point_auroc"], d["score_auroc"]])
            m = detection_matrix(det_rows)
            bundle.files.append(_write_csv(out_dir / f"confusion_{stem}_detect.csv", ("predicted",) + TRUTH_DETECT,
                                           [[lab, *m[i]] for i, lab in enumerate(DETECT_LABELS)]))
            if plots:
                bundle.files.append(_matrix_png(m, DETECT_LABELS, TRUTH_DETECT, f"{key} detect",
                                                out_dir / f"confusion_{stem}_detect.png"))
            roc.setdefault(key, {})["detect"] = detection_roc_points(det_rows)
        cls_rows = [r for r in rows if r.classify_label is not None]
        if cls_rows:
            rep = classification_report(cls_rows)
            entry["classify"] = rep.to_dict()
            for code, res in rep.per_class.items():
                c = res.counts
                table.append([backend, template, f"classify:{code}", c.total, c.tp, c.fp, c.tn, c.fn, res.f1,
                              None, _point_auroc(c), None])
            table.append([backend, template, "classify", len(cls_rows), "", "", "", "", None,
                          rep.weighted_f1, None, None])
            m = rep.matrix_array()
            bundle.files.append(_write_csv(out_dir / f"confusion_{stem}_classify.csv",
                                           ("predicted",) + rep.truth_labels,
                                           [[lab, *m[i]] for i, lab in enumerate(rep.pred_labels)]))
            if plots:
                bundle.files.append(_matrix_png(m, rep.pred_labels, rep.truth_labels, f"{key} classify",
                                                out_dir / f"confusion_{stem}_classify.png"))
            roc.setdefault(key, {})["classify"] = {
                code: [[0.0, 0.0], [1 - res.counts.specificity, res.counts.sensitivity], [1.0, 1.0]]
                for code, res in rep.per_class.items()
            }
        bundle.metrics[key] = entry

    bundle.files.append(_write_csv(out_dir / "metrics.csv", METRIC_COLUMNS,
                                   [[_fmt(v) for v in row] for row in table]))
    metrics_json = out_dir / "metrics.json"
    metrics_json.write_text(json.dumps(bundle.metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    bundle.files.append(metrics_json)
    roc_json = out_dir / "roc_points.json"
    roc_json.write_text(json.dumps(roc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    bundle.files.append(roc_json)

    protocols = result.by_protocol()
    if "simple" in protocols and "engineered" in protocols:
        bundle.comparisons = compare_prompts(protocols["simple"], protocols["engineered"], common_only=True)
        bundle.files.append(_write_csv(
            out_dir / "prompt_comparison.csv", ("backend", "task", "f1_simple", "f1_engineered", "change"),
            [[c.backend_id, c.task, _fmt(c.f1_simple), _fmt(c.f1_engineered), format_change(c.change)]
             for c in bundle.comparisons],
        ))
    failed = [r for r in result.rows if r.status != "ok"]
    if failed:
        bundle.files.append(_write_csv(out_dir / "failed_rows.csv", ("image_id", "backend", "template", "error"),
                                       [[r.image_id, r.backend_id, r.template_id, r.error] for r in failed]))
    if tilense_dir is not None:
        tl = out_dir / "tilense_index.json"
        tl.write_text(json.dumps(tilense_index(tilense_dir), indent=2) + "\n", encoding="utf-8")
        bundle.files.append(tl)
    index = out_dir / "index.json"
    index.write_text(json.dumps(bundle.index(), indent=2) + "\n", encoding="utf-8")
    bundle.files.append(index)
    return bundle


def tilense_index(directory: str | Path) -> list[dict]:
    """Summaries of the TiLense sidecars found under ``directory``."""
    out = []
    for p in sorted(Path(directory).glob("*.tilense.json")):
        side = json.loads(p.read_text(encoding="utf-8"))
        out.append({"image_id": side.get("image_id"), "base_answer": side.get("base_answer"),
                    "low_confidence": side.get("low_confidence"), "sidecar": p.name})
    return out


def load_and_report(
    results_path: str | Path,
    out_dir: Optional[str | Path] = None,
    tilense_dir: Optional[str | Path] = None,
) -> ReportBundle:
    results_path = Path(results_path)
    return build_report(RunResult.read_jsonl(results_path), out_dir or results_path.parent / "report",
                        tilense_dir=tilense_dir)
