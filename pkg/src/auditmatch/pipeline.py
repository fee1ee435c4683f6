"""End-to-end matching runs: retrieval only, or retrieve-then-rerank.

A query is a (report_id, requirement_id) pair. Under the ``per_report``
namespace policy each report gets its own index and a requirement is
matched against every report separately; under ``global`` the report id
is ``"all"`` and one index covers every segment.
"""
from __future__ import annotations

import json
import logging
import random
import time
from collections import Counter
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .corpus import Corpus
from .embedding import EmbeddingStore
from .metrics import AggregateReport, evaluate_run
from .report import ComparisonTable, compare_runs  # noqa: F401  (re-exported)
from .rerank import (
    CandidateSet,
    ChatClient,
    OracleChatClient,
    RemoteChatClient,
    RerankResult,
    ScriptedChatClient,
    get_template,
    rerank,
)
from .retrieval import (
    ALL,
    RankedList,
    build_clustered_index,
    build_exact_index,
    default_n_probe,
    search,
)

logger = logging.getLogger(__name__)

RETRIEVAL_ONLY = "retrieval_only"
TWO_STAGE = "two_stage"
PER_REPORT = "per_report"
GLOBAL = "global"

QueryKey = tuple  # (report_id, requirement_id)


class MatchError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = TWO_STAGE
    index_kind: str = "exact"
    m: int = 15
    k: int = 5
    template_id: str = "A"
    provider: str = "file"
    client: str = "mock-oracle"
    namespace_policy: str = PER_REPORT
    seed: int = 0
    label: str = ""
    num_clusters: int | None = None
    n_probe: int | None = None
    max_iters: int = 100
    workers: int = 1
    model: str | None = None
    endpoint: str | None = None
    scripted_response: str | None = None

    def __post_init__(self):
        if self.mode not in (RETRIEVAL_ONLY, TWO_STAGE):
            raise ConfigError(f"mode must be {RETRIEVAL_ONLY!r} or {TWO_STAGE!r}, got {self.mode!r}")
        if self.index_kind not in ("exact", "clustered"):
            raise ConfigError(f"index_kind must be 'exact' or 'clustered', got {self.index_kind!r}")
        if self.namespace_policy not in (PER_REPORT, GLOBAL):
            raise ConfigError(f"namespace_policy must be {PER_REPORT!r} or {GLOBAL!r}")
        if self.k < 1 or self.m < 1:
            raise ConfigError("k and m must be positive")
        if self.mode == TWO_STAGE and self.k > self.m:
            raise ConfigError(f"k={self.k} exceeds stage-1 width m={self.m}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        get_template(self.template_id)

    @property
    def stage1_width(self) -> int:
        return self.m if self.mode == TWO_STAGE else self.k

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> PipelineConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> PipelineConfig:
        return PipelineConfig(**{**asdict(self), **changes})


@dataclass
class MatchRun:
    config: PipelineConfig
    results: dict[QueryKey, RankedList]
    stage1: dict[QueryKey, RankedList] = field(default_factory=dict)
    reranks: dict[QueryKey, RerankResult] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def repair_counts(self) -> Counter:
        counts: Counter = Counter()
        for res in self.reranks.values():
            counts.update(res.repairs)
        return counts


def query_gold(corpus: Corpus, policy: str = PER_REPORT) -> dict[QueryKey, frozenset[str]]:
    """Gold sets keyed like run results. Empty-gold requirements are kept (and excluded later)."""
    if corpus.annotations is None:
        raise MatchError("corpus has no annotations")
    if policy == GLOBAL:
        return {(ALL, rid): corpus.annotations[rid] for rid in corpus.annotations}
    gold = corpus.annotations.by_report(corpus.segments)
    for rid in corpus.annotations.empty_requirements():
        gold[(ALL, rid)] = frozenset()
    return gold


def default_queries(corpus: Corpus, policy: str = PER_REPORT) -> list[QueryKey]:
    """Annotated (report, requirement) pairs when gold exists, else the full cross product."""
    if corpus.annotations is not None:
        return [key for key, gold in query_gold(corpus, policy).items() if gold]
    if policy == GLOBAL:
        return [(ALL, r.id) for r in corpus.requirements]
    return [(rep.id, r.id) for rep in corpus.reports() for r in corpus.requirements]


def client_from_config(config: PipelineConfig, corpus: Corpus) -> ChatClient:
    if config.client == "mock-oracle":
        if corpus.annotations is None:
            raise ConfigError("mock-oracle client needs annotations")
        return OracleChatClient.from_corpus(corpus.requirements, corpus.annotations, k=config.k)
    if config.client == "mock-scripted":
        if config.scripted_response is None:
            raise ConfigError("mock-scripted client needs scripted_response")
        return ScriptedChatClient(config.scripted_response)
    if config.client == "remote":
        if not config.endpoint or not config.model:
            raise ConfigError("remote client needs endpoint and model")
        return RemoteChatClient(config.endpoint, config.model, max_in_flight=config.workers)
    raise ConfigError(f"unknown client {config.client!r}")


def run_match(
    corpus: Corpus,
    store: EmbeddingStore,
    config: PipelineConfig,
    client: ChatClient | None = None,
    queries: Sequence[QueryKey] | None = None,
) -> MatchRun:
    t0 = time.perf_counter()
    queries = list(default_queries(corpus, config.namespace_policy) if queries is None else queries)
    report_of = {s.id: s.report_id for s in corpus.segments}
    needed = {rid for _, rid in queries}
    needed.update(s.id for s in corpus.segments)
    missing = sorted(store.missing(needed))
    if missing:
        raise MatchError(f"missing embeddings for ids: {', '.join(missing)}")
    if config.mode == TWO_STAGE and client is None:
        client = client_from_config(config, corpus)

    indexes = {}

    def index_for(namespace: str):
        if namespace not in indexes:
            if config.index_kind == "exact":
                indexes[namespace] = build_exact_index(store, namespace, report_of)
            else:
                indexes[namespace] = build_clustered_index(
                    store, namespace, config.num_clusters, config.seed, config.max_iters, report_of
                )
        return indexes[namespace]

    stage1: dict[QueryKey, RankedList] = {}
    for report_id, rid in queries:
        index = index_for(report_id)
        n_probe = None
        if config.index_kind == "clustered":
            n_probe = config.n_probe or default_n_probe(index.num_clusters)
            n_probe = min(n_probe, index.num_clusters)
        stage1[(report_id, rid)] = search(index, store[rid], config.stage1_width, n_probe, rid)
    t1 = time.perf_counter()

    run = MatchRun(config, {}, stage1)
    if config.mode == RETRIEVAL_ONLY:
        run.results = dict(stage1)
    else:
        template = get_template(config.template_id)

        def work(key):
            ranked = stage1[key]
            cs = CandidateSet(
                corpus.requirement(key[1]),
                [(sid, corpus.segment(sid).text) for sid in ranked.ids],
            )
            return rerank(client, template, cs, config.k)

        if config.workers > 1:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                outcomes = list(pool.map(work, queries))
        else:
            outcomes = [work(key) for key in queries]
        for key, res in zip(queries, outcomes):
            scores = dict(stage1[key].entries)
            run.reranks[key] = res
            run.results[key] = RankedList(key[1], tuple((sid, scores[sid]) for sid in res.chosen), key[0])
    run.timings = {"retrieval_s": t1 - t0, "rerank_s": time.perf_counter() - t1}
    return run


def evaluate_match(run: MatchRun, corpus: Corpus, k: int | None = None, label: str | None = None) -> AggregateReport:
    gold = query_gold(corpus, run.config.namespace_policy)
    gold = {key: g for key, g in gold.items() if key in run.results or not g}
    return evaluate_run(run.results, gold, k or run.config.k, label if label is not None else run.config.label)


def sample_queries(corpus: Corpus, sample_size: int, seed: int, report_id: str | None = None,
                   policy: str = PER_REPORT) -> list[QueryKey]:
    pool = [key for key in default_queries(corpus, policy) if report_id is None or key[0] == report_id]
    if sample_size > len(pool):
        raise MatchError(f"sample_size={sample_size} exceeds {len(pool)} annotated requirements")
    return sorted(random.Random(seed).sample(sorted(pool), sample_size))


def run_prompt_study(
    corpus: Corpus,
    store: EmbeddingStore,
    config_base: PipelineConfig,
    templates: Sequence[str] = ("A", "B", "C", "D"),
    sample_size: int = 20,
    seed: int = 0,
    client: ChatClient | None = None,
    report_id: str | None = None,
) -> list[AggregateReport]:
    """One two-stage run per template over the same seeded requirement sample."""
    queries = sample_queries(corpus, sample_size, seed, report_id, config_base.namespace_policy)
    reports = []
    for tid in templates:
        config = config_base.replace(mode=TWO_STAGE, template_id=tid, label=tid)
        run = run_match(corpus, store, config, client, queries)
        reports.append(evaluate_match(run, corpus, label=tid))
    return reports


def _entries(ranked: RankedList) -> list[dict]:
    return [{"segment_id": sid, "score": score} for sid, score in ranked.entries]


def write_run(run: MatchRun, out_dir: str | Path) -> None:
    """Write config.json, results.jsonl and repairs.json into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(run.config.to_dict(), indent=2, sort_keys=True) + "\n")
    with (out / "results.jsonl").open("w", encoding="utf-8") as fh:
        for key, ranked in run.results.items():
            rec = {
                "report_id": key[0],
                "requirement_id": key[1],
                "recommendations": _entries(ranked),
            }
            if key in run.reranks:
                res = run.reranks[key]
                rec["stage1"] = _entries(run.stage1[key])
                rec["rerank"] = {
                    "chosen": res.chosen,
                    "repairs": res.repairs,
                    "explanation": res.explanation,
                    "raw_response": res.raw_response,
                }
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
    stats = {"queries": len(run.results), "repairs": dict(sorted(run.repair_counts.items()))}
    (out / "repairs.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")


def read_run(run_dir: str | Path) -> MatchRun:
    run_dir = Path(run_dir)
    config = PipelineConfig.from_dict(json.loads((run_dir / "config.json").read_text()))
    run = MatchRun(config, {})
    with (run_dir / "results.jsonl").open(encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            key = (rec["report_id"], rec["requirement_id"])
            entries = tuple((e["segment_id"], e["score"]) for e in rec["recommendations"])
            run.results[key] = RankedList(key[1], entries, key[0])
            if "rerank" in rec:
                r = rec["rerank"]
                run.stage1[key] = RankedList(
                    key[1], tuple((e["segment_id"], e["score"]) for e in rec["stage1"]), key[0]
                )
                run.reranks[key] = RerankResult(r["chosen"], r["raw_response"], r["explanation"], r["repairs"])
    return run
