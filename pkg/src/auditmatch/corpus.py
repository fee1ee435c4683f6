"""Corpus loading and validation.

Three line-delimited JSON files describe a corpus:

* segments:     {"id", "report_id", "position", "text"}
* requirements: {"id", "standard_ref", "text"}
* annotations:  {"requirement_id", "segment_ids": [...]}

Loaded objects are frozen; a loaded corpus can be shared between threads.
"""
from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)


class CorpusError(ValueError):
    """Validation failure while loading corpus files.

    ``path`` and ``line`` are filled in when the offending record can be
    located, so callers can report ``file:line`` diagnostics.
    """

    def __init__(self, message: str, path: str | Path | None = None, line: int | None = None):
        self.path = str(path) if path is not None else None
        self.line = line
        self.reason = message
        if self.path is not None and line is not None:
            message = f"{self.path}:{line}: {message}"
        elif self.path is not None:
            message = f"{self.path}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Segment:
    id: str
    report_id: str
    position: int
    text: str


@dataclass(frozen=True)
class Requirement:
    id: str
    standard_ref: str
    text: str


@dataclass(frozen=True)
class Report:
    id: str
    name: str
    segment_count: int


class AnnotationSet(Mapping):
    """Gold links: requirement id -> frozenset of relevant segment ids.

    A requirement that never appeared in the annotation file has no entry;
    one that appeared with an empty list maps to an empty set.
    """

    def __init__(self, links: Mapping[str, Iterable[str]] | None = None):
        self._links: dict[str, frozenset[str]] = {
            rid: frozenset(sids) for rid, sids in (links or {}).items()
        }

    def __getitem__(self, requirement_id: str) -> frozenset[str]:
        return self._links[requirement_id]

    def __iter__(self) -> Iterator[str]:
        return iter(self._links)

    def __len__(self) -> int:
        return len(self._links)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, AnnotationSet):
            return self._links == other._links
        return NotImplemented

    def __repr__(self) -> str:
        return f"AnnotationSet({len(self._links)} requirements, {self.link_count} links)"

    @property
    def link_count(self) -> int:
        return sum(len(s) for s in self._links.values())

    def empty_requirements(self) -> list[str]:
        """Requirement ids present in the file with no gold segments."""
        return [rid for rid, sids in self._links.items() if not sids]

    def by_report(self, segments: Iterable[Segment]) -> dict[tuple[str, str], frozenset[str]]:
        """Split gold sets per report: (report_id, requirement_id) -> segment ids.

        Only pairs with at least one gold segment in that report are returned.
        """
        report_of = {s.id: s.report_id for s in segments}
        out: dict[tuple[str, str], set[str]] = {}
        for rid, sids in self._links.items():
            for sid in sids:
                out.setdefault((report_of[sid], rid), set()).add(sid)
        return {key: frozenset(out[key]) for key in sorted(out)}


@dataclass(frozen=True)
class Corpus:
    segments: tuple[Segment, ...]
    requirements: tuple[Requirement, ...]
    annotations: AnnotationSet | None = None
    _segment_index: dict = field(init=False, repr=False, compare=False)
    _requirement_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "requirements", tuple(self.requirements))
        object.__setattr__(self, "_segment_index", {s.id: s for s in self.segments})
        object.__setattr__(self, "_requirement_index", {r.id: r for r in self.requirements})

    def segment(self, segment_id: str) -> Segment:
        return self._segment_index[segment_id]

    def requirement(self, requirement_id: str) -> Requirement:
        return self._requirement_index[requirement_id]

    def reports(self) -> list[Report]:
        return reports_of(self.segments)

    def segments_of(self, report_id: str) -> list[Segment]:
        return [s for s in self.segments if s.report_id == report_id]


def reports_of(segments: Iterable[Segment]) -> list[Report]:
    """Reports in order of first appearance, with their segment counts."""
    counts: dict[str, int] = {}
    for seg in segments:
        counts[seg.report_id] = counts.get(seg.report_id, 0) + 1
    return [Report(id=rid, name=rid, segment_count=n) for rid, n in counts.items()]


def _iter_records(path: str | Path) -> Iterator[tuple[int, dict]]:
    path = Path(path)
    if not path.exists():
        raise CorpusError("file not found", path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"malformed JSON: {exc.msg}", path, lineno) from None
            if not isinstance(obj, dict):
                raise CorpusError("record is not a JSON object", path, lineno)
            yield lineno, obj


def _field(obj: dict, name: str, kind: type, path, lineno: int):
    if name not in obj:
        raise CorpusError(f"missing field {name!r}", path, lineno)
    value = obj[name]
    # bool is an int subclass; reject it for integer fields
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise CorpusError(f"field {name!r} must be {kind.__name__}", path, lineno)
    return value


def load_segments(path: str | Path) -> list[Segment]:
    segments: list[Segment] = []
    seen: set[str] = set()
    positions: set[tuple[str, int]] = set()
    for lineno, obj in _iter_records(path):
        seg = Segment(
            id=_field(obj, "id", str, path, lineno),
            report_id=_field(obj, "report_id", str, path, lineno),
            position=_field(obj, "position", int, path, lineno),
            text=_field(obj, "text", str, path, lineno),
        )
        if seg.id in seen:
            raise CorpusError(f"duplicate segment id {seg.id!r}", path, lineno)
        if seg.position < 0:
            raise CorpusError(f"negative position for segment {seg.id!r}", path, lineno)
        if (seg.report_id, seg.position) in positions:
            raise CorpusError(
                f"duplicate position {seg.position} in report {seg.report_id!r}", path, lineno
            )
        if not seg.text.strip():
            raise CorpusError(f"empty text for segment {seg.id!r}", path, lineno)
        seen.add(seg.id)
        positions.add((seg.report_id, seg.position))
        segments.append(seg)
    return segments


def load_requirements(path: str | Path) -> list[Requirement]:
    requirements: list[Requirement] = []
    seen: set[str] = set()
    for lineno, obj in _iter_records(path):
        req = Requirement(
            id=_field(obj, "id", str, path, lineno),
            standard_ref=_field(obj, "standard_ref", str, path, lineno),
            text=_field(obj, "text", str, path, lineno),
        )
        if req.id in seen:
            raise CorpusError(f"duplicate requirement id {req.id!r}", path, lineno)
        if not req.text.strip():
            raise CorpusError(f"empty text for requirement {req.id!r}", path, lineno)
        seen.add(req.id)
        requirements.append(req)
    return requirements


def load_annotations(
    path: str | Path,
    segments: Iterable[Segment],
    requirements: Iterable[Requirement],
) -> AnnotationSet:
    segment_ids = {s.id for s in segments}
    requirement_ids = {r.id for r in requirements}
    links: dict[str, list[str]] = {}
    for lineno, obj in _iter_records(path):
        rid = _field(obj, "requirement_id", str, path, lineno)
        sids = _field(obj, "segment_ids", list, path, lineno)
        if rid not in requirement_ids:
            raise CorpusError(f"unknown requirement id {rid!r}", path, lineno)
        bucket = links.setdefault(rid, [])
        for sid in sids:
            if not isinstance(sid, str):
                raise CorpusError(f"segment id {sid!r} for {rid!r} is not a string", path, lineno)
            if sid not in segment_ids:
                raise CorpusError(
                    f"unknown segment id {sid!r} for requirement {rid!r}", path, lineno
                )
            if sid in bucket:
                logger.warning("%s:%d: duplicate segment %r for %r ignored", path, lineno, sid, rid)
                continue
            bucket.append(sid)
    annotations = AnnotationSet(links)
    empty = annotations.empty_requirements()
    if empty:
        logger.info("%d requirements have no gold segments", len(empty))
    return annotations


def load_corpus(
    segments_path: str | Path,
    requirements_path: str | Path,
    annotations_path: str | Path | None = None,
) -> Corpus:
    segments = load_segments(segments_path)
    requirements = load_requirements(requirements_path)
    annotations = None
    if annotations_path is not None:
        annotations = load_annotations(annotations_path, segments, requirements)
    return Corpus(segments, requirements, annotations)


def _write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def dump_segments(path: str | Path, segments: Iterable[Segment]) -> None:
    _write_jsonl(
        path,
        ({"id": s.id, "report_id": s.report_id, "position": s.position, "text": s.text} for s in segments),
    )


def dump_requirements(path: str | Path, requirements: Iterable[Requirement]) -> None:
    _write_jsonl(
        path, ({"id": r.id, "standard_ref": r.standard_ref, "text": r.text} for r in requirements)
    )


def dump_annotations(path: str | Path, annotations: AnnotationSet) -> None:
    _write_jsonl(
        path,
        ({"requirement_id": rid, "segment_ids": sorted(annotations[rid])} for rid in annotations),
    )
