"""Command-line interface.

Exit codes: 0 success, 1 validation failure (bad input files, config or
arguments), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

from . import __version__
from .corpus import CorpusError, Requirement, load_annotations, load_corpus, load_requirements, load_segments
from .embedding import (
    EmbeddingError,
    FileEmbeddingProvider,
    HashEmbeddingProvider,
    RemoteEmbeddingProvider,
    StoreFormatError,
    embed_corpus,
    load_store,
    save_store,
)
from .fixtures import make_full_scale, make_synthetic, write_fixture
from .metrics import AggregateReport, MetricError, evaluate_run, write_per_requirement
from .pipeline import (
    ConfigError,
    MatchError,
    PipelineConfig,
    query_gold,
    read_run,
    run_match,
    run_prompt_study,
    write_run,
)
from .report import ReportError, compare_runs, render_report
from .rerank import CandidateSet, RerankError, TemplateError, get_template, render_prompt
from .retrieval import ALL, RetrievalError, build_clustered_index, build_exact_index, save_index

logger = logging.getLogger("auditmatch")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2

PATH_KEYS = ("segments", "requirements", "annotations", "store", "output_dir")


class UsageError(ValueError):
    pass


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_atomic(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def load_match_config(path: str | Path | None, overrides: dict) -> tuple[dict, PipelineConfig]:
    """Split a JSON config into file paths and a PipelineConfig; flags win."""
    raw: dict = {}
    base = Path(".")
    if path is not None:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        base = Path(path).parent
    raw.update({k: v for k, v in overrides.items() if v is not None})
    paths = {}
    for key in PATH_KEYS:
        value = raw.pop(key, None)
        if value is not None:
            p = Path(value)
            paths[key] = p if p.is_absolute() else base / p
    return paths, PipelineConfig.from_dict(raw)


# -- commands ---------------------------------------------------------------


def cmd_ingest(args) -> int:
    segments = load_segments(args.segments)
    requirements = load_requirements(args.requirements)
    links = 0
    if args.annotations:
        links = load_annotations(args.annotations, segments, requirements).link_count
    print(f"OK: {len(segments)} segments, {len(requirements)} requirements, {links} annotations")
    return EXIT_OK


def cmd_embed(args) -> int:
    corpus = load_corpus(args.segments, args.requirements)
    items = [(s.id, s.text) for s in corpus.segments] + [(r.id, r.text) for r in corpus.requirements]
    if args.provider == "hash":
        provider = HashEmbeddingProvider(dim=args.dim, seed=args.seed)
    elif args.provider == "file":
        if not args.source:
            raise UsageError("--provider file needs --source STORE")
        provider = FileEmbeddingProvider(args.source)
    else:
        if not args.url:
            raise UsageError("--provider remote needs --url")
        provider = RemoteEmbeddingProvider(args.url)
    store = embed_corpus(provider, items, batch_size=args.batch_size, seed=args.seed)
    save_store(store, args.out)
    print(f"wrote {len(store)} vectors (dim {store.dim}) to {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.full_scale:
        fixture = make_full_scale(seed=args.seed, with_store=True, dim=args.dim)
    else:
        fixture = make_synthetic(
            n_reports=args.reports,
            segments_per_report=args.segments_per_report,
            n_requirements=args.requirements,
            dim=args.dim,
            seed=args.seed,
        )
    paths = write_fixture(fixture, args.out)
    c = fixture.corpus
    print(f"wrote {len(c.segments)} segments, {len(c.requirements)} requirements to {args.out}")
    for name, p in paths.items():
        logger.info("%s: %s", name, p)
    return EXIT_OK


def cmd_index(args) -> int:
    store = load_store(args.store)
    report_of = None
    if args.segments:
        report_of = {s.id: s.report_id for s in load_segments(args.segments)}
    if args.kind == "exact":
        index = build_exact_index(store, args.namespace, report_of)
        summary = f"exact index '{index.namespace}': {len(index)} vectors"
    else:
        index = build_clustered_index(
            store, args.namespace, args.clusters, args.seed, args.max_iters, report_of
        )
        sizes = [len(index.members(c)) for c in range(index.num_clusters)]
        summary = (
            f"clustered index '{index.namespace}': {len(index)} vectors, "
            f"{index.num_clusters} clusters (sizes {min(sizes)}..{max(sizes)}), "
            f"{len(index.objective_history)} iterations"
        )
    save_index(index, args.out)
    print(summary)
    return EXIT_OK


def _match_overrides(args) -> dict:
    return {
        "mode": args.mode,
        "client": args.client,
        "k": args.k,
        "m": args.m,
        "template_id": args.template,
        "index_kind": args.index_kind,
        "label": args.label,
        "output_dir": args.out,
        "seed": args.seed,
    }


def cmd_match(args) -> int:
    config_path = args.config_file or args.config
    paths, config = load_match_config(config_path, _match_overrides(args))
    for key in ("segments", "requirements", "store", "output_dir"):
        if key not in paths:
            raise UsageError(f"config is missing {key!r}")
    inputs = {k: paths[k] for k in ("segments", "requirements", "annotations", "store") if k in paths}
    for name, p in inputs.items():
        if not p.exists():
            raise UsageError(f"{name} file not found: {p}")
    manifest = {
        "config_path": str(config_path) if config_path else None,
        "config": config.to_dict(),
        "inputs": {name: {"path": str(p), "sha256": sha256_file(p)} for name, p in inputs.items()},
        "tool_version": __version__,
        "created_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    corpus = load_corpus(paths["segments"], paths["requirements"], paths.get("annotations"))
    store = load_store(paths["store"])

    out = paths["output_dir"]
    out.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}.partial-"))
    try:
        run = run_match(corpus, store, config)
        write_run(run, staging)
        manifest["timings"] = run.timings
        write_atomic(staging / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if out.exists():
            shutil.rmtree(out)
        os.replace(staging, out)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    repairs = run.repair_counts
    detail = ", ".join(f"{k}={v}" for k, v in sorted(repairs.items())) or "none"
    print(f"matched {len(run.results)} queries ({config.mode}); repairs: {detail}; artifacts in {out}")
    return EXIT_OK


def _run_inputs(run_dir: Path) -> dict[str, str]:
    manifest = run_dir / "manifest.json"
    if manifest.exists():
        return {k: v["path"] for k, v in json.loads(manifest.read_text())["inputs"].items()}
    return {}


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run_dir)
    if not (run_dir / "results.jsonl").exists():
        raise UsageError(f"{run_dir} has no results.jsonl")
    run = read_run(run_dir)
    inputs = _run_inputs(run_dir)
    seg_path = args.segments or inputs.get("segments")
    req_path = args.requirements or inputs.get("requirements")
    ann_path = args.annotations or inputs.get("annotations")
    if not (seg_path and req_path and ann_path):
        raise UsageError("need --segments, --requirements and --annotations (not recorded in the run)")
    corpus = load_corpus(seg_path, req_path, ann_path)
    k = args.k or run.config.k
    label = args.label if args.label is not None else (run.config.label or run_dir.name)
    report = evaluate_run(run.results, query_gold(corpus, run.config.namespace_policy), k, label)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(details=True), indent=2) + "\n")
    write_per_requirement(out / "per_requirement.jsonl", report)
    text = render_report(report)
    (out / "report.txt").write_text(text)
    if not args.no_figure and report.defined:
        from .plotting import plot_per_requirement

        plot_per_requirement(report, out / "per_requirement.png")
    sys.stdout.write(text)
    return EXIT_OK


def _load_report(path: Path) -> AggregateReport:
    if path.is_dir():
        path = path / "report.json"
    if not path.exists():
        raise UsageError(f"{path} not found; run 'evaluate' first")
    return AggregateReport.from_dict(json.loads(path.read_text()))


def cmd_compare(args) -> int:
    reports = [_load_report(Path(p)) for p in args.inputs]
    table = compare_runs(reports, corner=args.corner, merge_identical=args.merge_identical)
    text = table.to_text()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.txt").write_text(text)
        (out / "comparison.csv").write_text(table.to_csv())
        (out / "comparison.json").write_text(
            json.dumps([r.to_dict() for r in reports], indent=2) + "\n"
        )
        if not args.no_figure:
            from .plotting import plot_comparison

            plot_comparison(table, out / "comparison.png")
    sys.stdout.write(text)
    return EXIT_OK


def _read_candidates(path: str) -> list[tuple[str, str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sid = rec.get("segment_id", rec.get("id"))
                out.append((str(sid), rec["text"]))
            except (ValueError, KeyError, AttributeError):
                raise CorpusError("expected {\"segment_id\"|\"id\", \"text\"}", path, lineno) from None
    return out


def cmd_render_prompt(args) -> int:
    template = get_template(args.template)
    if args.requirement_text is not None:
        requirement = Requirement(args.requirement_id or "-", "", args.requirement_text)
    else:
        if not (args.requirements and args.requirement_id):
            raise UsageError("need --requirements and --requirement-id, or --requirement-text")
        found = {r.id: r for r in load_requirements(args.requirements)}
        if args.requirement_id not in found:
            raise UsageError(f"unknown requirement id {args.requirement_id!r}")
        requirement = found[args.requirement_id]
    cs = CandidateSet(requirement, _read_candidates(args.candidates))
    sys.stdout.write(render_prompt(template, cs))
    return EXIT_OK


def cmd_prompt_study(args) -> int:
    config_path = args.config_file or args.config
    overrides = {"client": args.client, "seed": args.seed}
    paths, config = load_match_config(config_path, overrides)
    corpus = load_corpus(paths["segments"], paths["requirements"], paths.get("annotations"))
    store = load_store(paths["store"])
    reports = run_prompt_study(
        corpus, store, config, args.templates, args.sample_size, args.seed or 0, report_id=args.report
    )
    table = compare_runs(reports, corner="Prompt \\ in %", merge_identical=True)
    text = table.to_text()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "prompt_study.txt").write_text(text)
        (out / "prompt_study.csv").write_text(table.to_csv())
        (out / "prompt_study.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2) + "\n")
        if not args.no_figure:
            from .plotting import plot_comparison

            plot_comparison(table, out / "prompt_study.png")
    sys.stdout.write(text)
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS so a subcommand does not reset values given before it
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)

    ap = argparse.ArgumentParser(prog="auditmatch", parents=[common], description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="validate corpus files")
    p.add_argument("--segments", required=True)
    p.add_argument("--requirements", required=True)
    p.add_argument("--annotations")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("embed", parents=[common], help="embed segments and requirements into a store")
    p.add_argument("--segments", required=True)
    p.add_argument("--requirements", required=True)
    p.add_argument("--provider", choices=["hash", "file", "remote"], default="hash")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--source", help="store file for --provider file")
    p.add_argument("--url", help="encoder endpoint for --provider remote")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic corpus and store")
    p.add_argument("out")
    p.add_argument("--reports", type=int, default=10)
    p.add_argument("--segments-per-report", type=int, default=20)
    p.add_argument("--requirements", type=int, default=20)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--full-scale", action="store_true", help="7097 segments, 10 reports, 1214 requirements")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("index", parents=[common], help="build an exact or clustered index file")
    p.add_argument("--store", required=True)
    p.add_argument("--segments", help="segments file, needed for per-report namespaces")
    p.add_argument("--namespace", default=ALL)
    p.add_argument("--kind", choices=["exact", "clustered"], default="exact")
    p.add_argument("--clusters", type=int, default=None)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("match", parents=[common], help="run the matching pipeline")
    p.add_argument("config_file", nargs="?")
    p.add_argument("--mode", choices=["retrieval_only", "two_stage"])
    p.add_argument("--client", choices=["mock-oracle", "mock-scripted", "remote"])
    p.add_argument("--k", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--template", choices=["A", "B", "C", "D"])
    p.add_argument("--index-kind", choices=["exact", "clustered"])
    p.add_argument("--label")
    p.add_argument("--out")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("evaluate", parents=[common], help="score a run against gold annotations")
    p.add_argument("run_dir")
    p.add_argument("--segments")
    p.add_argument("--requirements")
    p.add_argument("--annotations")
    p.add_argument("--k", type=int)
    p.add_argument("--label")
    p.add_argument("--out")
    p.add_argument("--no-figure", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", parents=[common], help="side-by-side table of evaluated runs")
    p.add_argument("inputs", nargs="+", help="run directories or report.json files")
    p.add_argument("--corner", default="Model \\ in %")
    p.add_argument("--merge-identical", action="store_true")
    p.add_argument("--out")
    p.add_argument("--no-figure", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("render-prompt", parents=[common], help="print a rendered prompt")
    p.add_argument("template")
    p.add_argument("--requirements")
    p.add_argument("--requirement-id")
    p.add_argument("--requirement-text")
    p.add_argument("--candidates", required=True, help="JSONL of {segment_id, text}")
    p.set_defaults(func=cmd_render_prompt)

    p = sub.add_parser("prompt-study", parents=[common], help="compare templates on a requirement sample")
    p.add_argument("config_file", nargs="?")
    p.add_argument("--templates", nargs="+", default=["A", "B", "C", "D"])
    p.add_argument("--sample-size", type=int, default=20)
    p.add_argument("--report")
    p.add_argument("--client", choices=["mock-oracle", "mock-scripted", "remote"])
    p.add_argument("--out")
    p.add_argument("--no-figure", action="store_true")
    p.set_defaults(func=cmd_prompt_study)
    return ap


VALIDATION_ERRORS = (
    CorpusError,
    ConfigError,
    TemplateError,
    StoreFormatError,
    RetrievalError,
    ReportError,
    MetricError,
    UsageError,
    json.JSONDecodeError,
)
RUNTIME_ERRORS = (MatchError, RerankError, EmbeddingError, OSError, KeyError)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.seed is None and args.command in ("synth", "index", "embed"):
        args.seed = 0
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
