"""Command-line entry point: evaluate, tilense, extract, verify-fixtures, report."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import prompts
from .backends import AuthError, Backend, BackendError, NetworkError, ResponseCache, RunLedger, load_backend
from .dataset import ManifestError
from .extraction import AuditItem, export_audit, extract, sample_for_audit, to_task_label
from .fixtures import FixtureError, load_counts, verify_counts
from .preprocess import load_image, resize_standard
from .report import build_report, load_and_report
from .runner import BackendsUnreachable, ConfigError, RunConfig, run_evaluation
from .tilense import DEFAULT_PROMPT, run_tilense

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NETWORK = 3
EXIT_VERIFY = 4

DEFAULT_OUT = Path("vlmpolyp_out")

log = logging.getLogger("vlmpolyp")


def _global_flags() -> argparse.ArgumentParser:
    # SUPPRESS lets the flags sit before or after the subcommand without the
    # subparser default clobbering a value given earlier.
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="run config JSON")
    p.add_argument("--backend", default=argparse.SUPPRESS,
                   help="'mock', a backend config path, or an alias from the run config")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--cache-dir", type=Path, default=argparse.SUPPRESS)
    p.add_argument("--out-dir", type=Path, default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="vlmpolyp", parents=[common],
                                     description="Zero-shot VLM polyp detection and classification harness.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    ev = sub.add_parser("evaluate", parents=[common], help="run a manifest through backends and prompts")
    ev.add_argument("--split", choices=("exp0", "main", "all"))
    ev.add_argument("--templates", nargs="+", choices=prompts.TEMPLATE_IDS)
    ev.add_argument("--task", choices=("detect", "classify", "both"))
    ev.add_argument("--concurrency", type=int)
    ev.add_argument("--cache-mode", choices=("off", "read_write", "replay"))
    ev.add_argument("--resize", action=argparse.BooleanOptionalAction, default=None,
                    help="send 300x300 resized images instead of the originals")

    tl = sub.add_parser("tilense", parents=[common], help="tile-occlusion heat maps for images")
    tl.add_argument("images", nargs="+", type=Path)
    tl.add_argument("--prompt", default=DEFAULT_PROMPT, choices=prompts.TEMPLATE_IDS)
    tl.add_argument("--runs", type=int, default=5)
    tl.add_argument("--fill", default="black", choices=("black", "mean"))
    tl.add_argument("--heat-mode", default="mean", choices=("mean", "max"))
    tl.add_argument("--task", default="detect", choices=("detect", "classify"))
    tl.add_argument("--workers", type=int, default=1)
    tl.add_argument("--resize", action="store_true")

    ex = sub.add_parser("extract", parents=[common], help="map free-text replies to labels")
    ex.add_argument("input", type=Path, help="CSV with id,raw_text and optional expected columns")
    ex.add_argument("--task", default="classify", choices=("detect", "classify"))
    ex.add_argument("--llm-backend", help="backend for the fallback on unsure replies")
    ex.add_argument("--audit", type=int, default=0, help="sample N rows into audit.csv")

    vf = sub.add_parser("verify-fixtures", parents=[common], help="recompute published F1 values")
    vf.add_argument("--fixture", type=Path)
    vf.add_argument("--f1-tol", type=float, default=0.005)
    vf.add_argument("--weighted-tol", type=float, default=0.005)
    vf.add_argument("--strict", action="store_true", help="ignore expected_delta exemptions")

    rp = sub.add_parser("report", parents=[common], help="rebuild the report from a results file")
    rp.add_argument("--results", type=Path)
    rp.add_argument("--tilense-dir", type=Path)
    return parser


def _opt(args, name, default=None):
    return getattr(args, name, default)


def _out_dir(args, fallback: Optional[Path] = None) -> Path:
    return _opt(args, "out_dir") or fallback or DEFAULT_OUT


def _aliases(args) -> dict[str, str]:
    cfg_path = _opt(args, "config")
    if cfg_path is None:
        return {}
    return RunConfig.from_file(cfg_path).backend_configs


def _backend(spec: str, args, ledger: Optional[RunLedger] = None) -> Backend:
    spec = _aliases(args).get(spec, spec)
    try:
        return load_backend(spec, ledger=ledger)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_evaluate(args) -> int:
    cfg_path = _opt(args, "config")
    if cfg_path is None:
        raise ConfigError("evaluate needs --config pointing at a run config JSON")
    cfg = RunConfig.from_file(cfg_path)
    overrides = {
        "backends": [args.backend] if _opt(args, "backend") else None,
        "seed": _opt(args, "seed"),
        "cache_dir": _opt(args, "cache_dir"),
        "out_dir": _opt(args, "out_dir"),
        "split": args.split,
        "templates": args.templates,
        "task": args.task,
        "concurrency": args.concurrency,
        "cache_mode": args.cache_mode,
        "resize": args.resize,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    cfg.validate()
    result = run_evaluation(cfg)
    bundle = build_report(result, cfg.out_dir / "report")
    print(f"{len(result.ok_rows)}/{len(result)} rows ok; report in {bundle.out_dir}")
    return EXIT_OK


def cmd_tilense(args) -> int:
    out_dir = _out_dir(args)
    ledger = RunLedger(out_dir / "tilense_ledger.jsonl")
    backend = _backend(_opt(args, "backend", "mock"), args, ledger)
    failures = []
    for path in args.images:
        try:
            image = load_image(path)
            if args.resize:
                image = resize_standard(image)
            res = run_tilense(
                backend, image, path.stem, out_dir, prompt=args.prompt, n_runs=args.runs, fill=args.fill,
                task=args.task, heat_mode=args.heat_mode, max_workers=args.workers,
                extra_sidecar={"backend_id": backend.backend_id, "runs": args.runs, "resized": args.resize},
            )
            print(f"{path.name}: base={res.scores.base_answer} scores={res.scores.per_tile}")
        except (BackendError, OSError, ValueError) as exc:
            failures.append((path, exc))
            print(f"{path.name}: FAILED {type(exc).__name__}: {exc}", file=sys.stderr)
    if not failures:
        return EXIT_OK
    if any(isinstance(e, BackendError) for _, e in failures):
        return EXIT_NETWORK
    return EXIT_CONFIG


def cmd_extract(args) -> int:
    out_dir = _out_dir(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    llm = _backend(args.llm_backend, args) if args.llm_backend else None
    cache = ResponseCache(args.cache_dir) if _opt(args, "cache_dir") else None
    try:
        with args.input.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read {args.input}: {exc}") from None
    if rows and not {"id", "raw_text"} <= set(rows[0]):
        raise ConfigError("extract input needs id and raw_text columns")
    items, mismatches = [], []
    out_path = out_dir / "extracted.csv"
    with out_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "category", "pathology", "method", "evidence_span"])
        for r in rows:
            outcome = extract(r["raw_text"], args.task, llm, cache)
            label = to_task_label(outcome, args.task)
            w.writerow([r["id"], label, outcome.category.value,
                        outcome.pathology.code if outcome.pathology else "", outcome.method, outcome.evidence_span])
            items.append(AuditItem(r["id"], r["raw_text"], outcome))
            expected = (r.get("expected") or "").strip()
            if expected and expected != label:
                mismatches.append((r["id"], expected, label))
    if args.audit:
        export_audit(sample_for_audit(items, min(args.audit, len(items)), _opt(args, "seed", 0)),
                     out_dir / "audit.csv")
    print(f"{len(items)} replies extracted to {out_path}")
    for rid, expected, got in mismatches:
        print(f"MISMATCH {rid}: expected {expected}, got {got}")
    return EXIT_VERIFY if mismatches else EXIT_OK


def cmd_verify_fixtures(args) -> int:
    rows = load_counts(args.fixture) if args.fixture else load_counts()
    checks = verify_counts(rows, args.f1_tol, args.weighted_tol, honor_known=not args.strict)
    bad = 0
    for c in checks:
        status = "ok" if c.ok else "FAIL"
        note = f" (known discrepancy, expected delta {c.expected_delta:+.3f})" if c.known_discrepancy else ""
        print(f"{status:4} {c.model:20} {c.item:10} computed={c.computed:.3f} reported={c.reported:.3f} "
              f"delta={c.delta:+.3f}{note}")
        bad += not c.ok
    print(f"{len(checks) - bad}/{len(checks)} checks within tolerance")
    return EXIT_VERIFY if bad else EXIT_OK


def cmd_report(args) -> int:
    base = _out_dir(args)
    results = args.results or base / "results.jsonl"
    if not results.is_file():
        raise ConfigError(f"results file not found: {results}")
    bundle = load_and_report(results, base / "report" if _opt(args, "out_dir") else None, args.tilense_dir)
    print(f"report written to {bundle.out_dir} ({len(bundle.files)} files)")
    return EXIT_OK


COMMANDS = {
    "evaluate": cmd_evaluate,
    "tilense": cmd_tilense,
    "extract": cmd_extract,
    "verify-fixtures": cmd_verify_fixtures,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ManifestError, FixtureError, prompts.PromptError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    except (BackendsUnreachable, NetworkError, AuthError) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_NETWORK


if __name__ == "__main__":
    sys.exit(main())
