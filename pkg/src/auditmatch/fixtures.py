"""Synthetic corpora with controllable embedding geometry.

Real audit data is proprietary, so tests and demos run on generated
reports. Requirement vectors are built near their gold segments, which
gives retrieval a realistic but imperfect signal.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import AnnotationSet, Corpus, Requirement, Segment, dump_annotations, dump_requirements, dump_segments
from .embedding import EmbeddingStore, save_store

FULL_SEGMENT_TOTAL = 7097
FULL_REPORT_COUNT = 10
FULL_REQUIREMENT_COUNT = 1214

_WORDS = (
    "revenue lease impairment goodwill provision tax deferred asset liability equity "
    "hedge derivative fair value disclosure segment pension obligation cash flow "
    "inventory receivable depreciation amortisation contingent subsidiary associate "
    "joint venture financial instrument credit risk liquidity interest currency"
).split()


@dataclass
class SyntheticFixture:
    corpus: Corpus
    store: EmbeddingStore


def _text(rng: np.random.Generator, prefix: str, n_words: int = 12) -> str:
    words = rng.choice(_WORDS, size=n_words)
    return f"{prefix}: " + " ".join(words) + "."


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def split_counts(total: int, parts: int, rng: np.random.Generator | None = None) -> list[int]:
    """``parts`` positive integers summing to ``total``, roughly balanced."""
    if parts < 1 or total < parts:
        raise ValueError("need total >= parts >= 1")
    base = [total // parts] * parts
    for i in range(total % parts):
        base[i] += 1
    if rng is not None:
        # shift mass between neighbours for uneven but positive counts
        for i in range(parts - 1):
            delta = int(rng.integers(-base[i] // 3, base[i] // 3 + 1))
            if base[i] - delta >= 1 and base[i + 1] + delta >= 1:
                base[i] -= delta
                base[i + 1] += delta
    return base


def make_synthetic(
    n_reports: int = 10,
    segments_per_report: int | list[int] = 20,
    n_requirements: int = 20,
    dim: int = 32,
    gold_range: tuple[int, int] = (1, 4),
    noise: float = 0.6,
    annotated_fraction: float = 1.0,
    seed: int = 0,
    with_store: bool = True,
) -> SyntheticFixture:
    """Random corpus where each requirement has gold segments in (some) reports.

    The requirement vector is the normalised mean of its gold segment
    vectors plus Gaussian noise of scale ``noise``.
    """
    rng = np.random.default_rng(seed)
    counts = segments_per_report if isinstance(segments_per_report, list) else [segments_per_report] * n_reports
    segments: list[Segment] = []
    for r, count in enumerate(counts):
        rid = f"R{r:02d}"
        for p in range(count):
            segments.append(Segment(f"{rid}-s{p:04d}", rid, p, _text(rng, f"{rid} note {p}")))
    requirements = [
        Requirement(f"Q{j:04d}", f"IFRS-{1 + j // 25}.{j % 25}", _text(rng, f"Requirement {j}", 10))
        for j in range(n_requirements)
    ]
    by_report: dict[int, list[Segment]] = {}
    for seg in segments:
        by_report.setdefault(int(seg.report_id[1:]), []).append(seg)

    links: dict[str, list[str]] = {}
    for req in requirements:
        gold: list[str] = []
        for r in range(len(counts)):
            if rng.random() >= annotated_fraction:
                continue
            pool = by_report[r]
            n_gold = int(rng.integers(gold_range[0], gold_range[1] + 1))
            picks = rng.choice(len(pool), size=min(n_gold, len(pool)), replace=False)
            gold.extend(pool[i].id for i in sorted(picks))
        links[req.id] = gold
    annotations = AnnotationSet(links)
    corpus = Corpus(segments, requirements, annotations)
    if not with_store:
        return SyntheticFixture(corpus, None)

    seg_vecs = rng.standard_normal((len(segments), dim))
    seg_vecs /= np.linalg.norm(seg_vecs, axis=1, keepdims=True)
    pos = {s.id: i for i, s in enumerate(segments)}
    req_vecs = []
    for req in requirements:
        gold = links[req.id]
        centre = seg_vecs[[pos[g] for g in gold]].mean(axis=0) if gold else np.zeros(dim)
        if np.linalg.norm(centre) > 0:
            centre = _unit(centre)
        req_vecs.append(_unit(centre + noise * rng.standard_normal(dim) / np.sqrt(dim)))
    store = EmbeddingStore(
        [s.id for s in segments] + [r.id for r in requirements],
        np.vstack([seg_vecs, np.array(req_vecs)]),
        seed=seed,
    )
    return SyntheticFixture(corpus, store)


def make_promotion_fixture(
    n_requirements: int = 4,
    segments_per_report: int = 20,
    gold_ranks: tuple[int, ...] = (6, 8, 11, 15),
    missed_ranks: tuple[int, ...] = (17, 19),
    dim: int = 32,
    seed: int = 0,
) -> SyntheticFixture:
    """Corpus where retrieval ranks gold segments at fixed positions.

    Requirement j is annotated only in report j. Its gold segments sit at
    stage-1 ranks ``gold_ranks`` (1-based), below five non-gold segments. An
    extra last requirement has its gold only at ``missed_ranks``, out of
    reach of a top-15 stage 1.
    """
    rng = np.random.default_rng(seed)
    segments: list[Segment] = []
    requirements: list[Requirement] = []
    links: dict[str, list[str]] = {}
    ids: list[str] = []
    vecs: list[np.ndarray] = []
    cosines = np.linspace(0.95, 0.05, segments_per_report)
    for j in range(n_requirements + 1):
        rid = f"R{j:02d}"
        req = Requirement(f"Q{j:04d}", f"IFRS-{j}", _text(rng, f"Requirement {j}", 10))
        requirements.append(req)
        q = np.zeros(dim)
        q[j] = 1.0
        ranks = gold_ranks if j < n_requirements else missed_ranks
        gold = []
        for p in range(segments_per_report):
            seg = Segment(f"{rid}-s{p:04d}", rid, p, _text(rng, f"{rid} note {p}"))
            segments.append(seg)
            perp = rng.standard_normal(dim)
            perp[j] = 0.0
            perp = _unit(perp)
            c = cosines[p]
            ids.append(seg.id)
            vecs.append(c * q + np.sqrt(1 - c * c) * perp)
            if p + 1 in ranks:
                gold.append(seg.id)
        links[req.id] = gold
        ids.append(req.id)
        vecs.append(q)
    corpus = Corpus(segments, requirements, AnnotationSet(links))
    return SyntheticFixture(corpus, EmbeddingStore(ids, np.array(vecs), seed=seed))


def make_full_scale(seed: int = 0, with_store: bool = False, dim: int = 32) -> SyntheticFixture:
    """7097 segments over 10 reports and a 1214-item requirement catalogue."""
    rng = np.random.default_rng(seed)
    counts = split_counts(FULL_SEGMENT_TOTAL, FULL_REPORT_COUNT, rng)
    return make_synthetic(
        n_reports=FULL_REPORT_COUNT,
        segments_per_report=counts,
        n_requirements=FULL_REQUIREMENT_COUNT,
        dim=dim,
        annotated_fraction=0.05,
        seed=seed,
        with_store=with_store,
    )


def write_fixture(fixture: SyntheticFixture, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "segments": out / "segments.jsonl",
        "requirements": out / "requirements.jsonl",
        "annotations": out / "annotations.jsonl",
    }
    dump_segments(paths["segments"], fixture.corpus.segments)
    dump_requirements(paths["requirements"], fixture.corpus.requirements)
    dump_annotations(paths["annotations"], fixture.corpus.annotations)
    if fixture.store is not None:
        paths["store"] = out / "store.embs"
        save_store(fixture.store, paths["store"])
    return paths
