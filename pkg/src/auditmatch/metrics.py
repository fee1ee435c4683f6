"""Top-k evaluation metrics: precision, recall, sensitivity, F1 and AP.

Sensitivity is recall with the denominator capped at k, so a system that
returns k items is not penalised when a requirement has more than k gold
segments. AP is truncated at k and normalised by the same ``min(k, |A|)``.
"""
from __future__ import annotations

import json
import math
from collections.abc import Collection, Hashable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .retrieval import RankedList


class MetricError(ValueError):
    pass


def _ids(predicted) -> list[str]:
    return predicted.ids if isinstance(predicted, RankedList) else list(predicted)


def _check(predicted: Sequence[str], gold: Collection[str], k: int) -> None:
    if k < 1:
        raise MetricError("k must be >= 1")
    if not gold:
        raise MetricError("gold set is empty; metric undefined")


def hits_at_k(predicted, gold: Collection[str], k: int) -> int:
    top = _ids(predicted)[:k]
    return len(set(top) & set(gold))


def precision_at_k(predicted, gold: Collection[str], k: int) -> float:
    predicted = _ids(predicted)
    _check(predicted, gold, k)
    return hits_at_k(predicted, gold, k) / k


def recall_at_k(predicted, gold: Collection[str], k: int) -> float:
    predicted = _ids(predicted)
    _check(predicted, gold, k)
    return hits_at_k(predicted, gold, k) / len(set(gold))


def sensitivity_at_k(predicted, gold: Collection[str], k: int) -> float:
    predicted = _ids(predicted)
    _check(predicted, gold, k)
    return hits_at_k(predicted, gold, k) / min(k, len(set(gold)))


def f1_at_k(predicted, gold: Collection[str], k: int) -> float:
    p = precision_at_k(predicted, gold, k)
    r = recall_at_k(predicted, gold, k)
    if p + r == 0:
        return 0.0
    return 2 * p * r / (p + r)


def average_precision(predicted, gold: Collection[str], k: int) -> float:
    predicted = _ids(predicted)
    _check(predicted, gold, k)
    if len(set(predicted)) != len(predicted):
        raise MetricError("predictions contain duplicates")
    gold = set(gold)
    found = 0
    total = 0.0
    for i, sid in enumerate(predicted[:k], start=1):
        if sid in gold:
            found += 1
            total += found / i
    return total / min(k, len(gold))


@dataclass(frozen=True)
class RequirementEval:
    requirement_id: str
    k: int
    hits: int
    precision: float
    recall: float
    sensitivity: float
    f1: float
    ap: float
    gold_size: int
    report_id: str | None = None


def evaluate_requirement(predicted, gold: Collection[str], k: int, requirement_id: str = "", report_id=None) -> RequirementEval:
    return RequirementEval(
        requirement_id=requirement_id,
        k=k,
        hits=hits_at_k(predicted, gold, k),
        precision=precision_at_k(predicted, gold, k),
        recall=recall_at_k(predicted, gold, k),
        sensitivity=sensitivity_at_k(predicted, gold, k),
        f1=f1_at_k(predicted, gold, k),
        ap=average_precision(predicted, gold, k),
        gold_size=len(set(gold)),
        report_id=report_id,
    )


METRIC_FIELDS = ("mean_sensitivity", "map", "mean_f1", "mean_precision", "mean_recall")


@dataclass
class AggregateReport:
    """Macro averages over requirements with non-empty gold.

    Means are ``None`` when nothing was evaluated.
    """

    model_label: str
    k: int
    n_requirements_evaluated: int
    mean_sensitivity: float | None
    map: float | None
    mean_f1: float | None
    mean_precision: float | None
    mean_recall: float | None
    n_excluded: int = 0
    per_requirement: list[RequirementEval] = field(default_factory=list, repr=False)

    @property
    def defined(self) -> bool:
        return self.n_requirements_evaluated > 0

    def to_dict(self, details: bool = False) -> dict:
        out = {name: getattr(self, name) for name in ("model_label", "k", "n_requirements_evaluated", *METRIC_FIELDS, "n_excluded")}
        if details:
            out["per_requirement"] = [asdict(e) for e in self.per_requirement]
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> AggregateReport:
        per = [RequirementEval(**e) for e in data.get("per_requirement", [])]
        return cls(
            model_label=data["model_label"],
            k=int(data["k"]),
            n_requirements_evaluated=int(data.get("n_requirements_evaluated", len(per))),
            n_excluded=int(data.get("n_excluded", 0)),
            per_requirement=per,
            **{name: data.get(name) for name in METRIC_FIELDS},
        )

    def by_report(self) -> dict[str, AggregateReport]:
        """Per-report breakdown, for runs evaluated on (report, requirement) pairs."""
        groups: dict[str, list[RequirementEval]] = {}
        for e in self.per_requirement:
            groups.setdefault(e.report_id or "all", []).append(e)
        return {rid: aggregate(evals, self.model_label, self.k) for rid, evals in groups.items()}


def _mean(values: list[float]) -> float | None:
    return math.fsum(values) / len(values) if values else None


def aggregate(evals: Sequence[RequirementEval], model_label: str, k: int, n_excluded: int = 0) -> AggregateReport:
    return AggregateReport(
        model_label=model_label,
        k=k,
        n_requirements_evaluated=len(evals),
        mean_sensitivity=_mean([e.sensitivity for e in evals]),
        map=_mean([e.ap for e in evals]),
        mean_f1=_mean([e.f1 for e in evals]),
        mean_precision=_mean([e.precision for e in evals]),
        mean_recall=_mean([e.recall for e in evals]),
        n_excluded=n_excluded,
        per_requirement=list(evals),
    )


def evaluate_run(
    run: Mapping[Hashable, RankedList],
    annotations: Mapping[Hashable, Collection[str]],
    k: int,
    model_label: str = "",
) -> AggregateReport:
    """Score every annotated query in ``run`` and macro-average.

    Keys may be plain requirement ids or (report_id, requirement_id)
    pairs, as long as ``run`` and ``annotations`` agree. Queries with an
    empty gold set are excluded and counted in ``n_excluded``.
    """
    evals: list[RequirementEval] = []
    excluded = 0
    missing = []
    for key, gold in annotations.items():
        if not gold:
            excluded += 1
            continue
        if key not in run:
            missing.append(key)
            continue
        if isinstance(key, tuple):
            report_id, requirement_id = key
        else:
            report_id, requirement_id = None, key
        evals.append(evaluate_requirement(run[key], gold, k, str(requirement_id), report_id))
    if missing:
        raise MetricError(f"annotated requirements missing from run: {missing[:10]}")
    return aggregate(evals, model_label, k, excluded)


def write_per_requirement(path: str | Path, report: AggregateReport) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for e in report.per_requirement:
            fh.write(json.dumps(asdict(e), sort_keys=True) + "\n")
