import json
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from auditmatch.metrics import (
    MetricError,
    average_precision,
    evaluate_run,
    f1_at_k,
    precision_at_k,
    recall_at_k,
    sensitivity_at_k,
    write_per_requirement,
)
from auditmatch.retrieval import RankedList

import oracles

P5 = ["s1", "s2", "s3", "s4", "s5"]
A3 = {"s2", "s7", "s9"}


def ranked(rid, ids):
    return RankedList(rid, tuple((sid, 1.0 - i / 100) for i, sid in enumerate(ids)))


class TestWorkedExamples:
    def test_precision(self):
        assert precision_at_k(P5, A3, 5) == 0.2
        assert precision_at_k(P5, set(P5) | {"x"}, 5) == 1.0
        assert precision_at_k(P5, {"x"}, 5) == 0.0

    def test_sensitivity(self):
        assert sensitivity_at_k(P5, A3, 5) == pytest.approx(1 / 3, abs=1e-15)
        assert sensitivity_at_k(P5, {"s1", "s4"}, 5) == 1.0
        gold8 = set(P5) | {"x1", "x2", "x3"}
        assert sensitivity_at_k(P5, gold8, 5) == 1.0
        assert recall_at_k(P5, gold8, 5) == 0.625

    def test_recall(self):
        assert recall_at_k(P5, A3, 5) == pytest.approx(1 / 3, abs=1e-15)
        assert recall_at_k(P5, {"s3"}, 5) == 1.0
        assert recall_at_k(P5, {"zz"}, 5) == 0.0

    def test_f1(self):
        assert f1_at_k(P5, A3, 5) == pytest.approx(0.25, abs=1e-15)
        assert f1_at_k(P5, set(P5), 5) == 1.0
        assert f1_at_k(P5, {"zz"}, 5) == 0.0

    def test_average_precision(self):
        # (1/2) * (1/1 + 2/4)
        assert average_precision(["a", "x1", "x2", "b", "x3"], {"a", "b"}, 5) == 0.75
        assert average_precision(P5, set(P5) | {"extra"}, 5) == 1.0
        assert average_precision(P5, {"zz"}, 5) == 0.0

    def test_accepts_ranked_list(self):
        assert average_precision(ranked("r", ["a", "x", "b"]), {"a", "b"}, 5) == pytest.approx((1 + 2 / 3) / 2)

    def test_errors(self):
        with pytest.raises(MetricError, match="empty"):
            precision_at_k(P5, set(), 5)
        with pytest.raises(MetricError, match="duplicates"):
            average_precision(["a", "a"], {"a"}, 5)
        with pytest.raises(MetricError):
            recall_at_k(P5, {"s1"}, 0)


@st.composite
def instances(draw):
    universe = [f"d{i}" for i in range(15)]
    k = draw(st.integers(1, 10))
    gold = draw(st.sets(st.sampled_from(universe), min_size=1, max_size=10))
    pred = draw(st.permutations(universe))[: draw(st.integers(0, k))]
    return pred, gold, k


class TestProperties:
    @given(instances())
    def test_oracle_agreement(self, inst):
        pred, gold, k = inst
        assert precision_at_k(pred, gold, k) == pytest.approx(float(oracles.precision(pred, gold, k)), abs=1e-12)
        assert recall_at_k(pred, gold, k) == pytest.approx(float(oracles.recall(pred, gold, k)), abs=1e-12)
        assert sensitivity_at_k(pred, gold, k) == pytest.approx(float(oracles.sensitivity(pred, gold, k)), abs=1e-12)
        assert f1_at_k(pred, gold, k) == pytest.approx(float(oracles.f1(pred, gold, k)), abs=1e-12)
        assert average_precision(pred, gold, k) == pytest.approx(float(oracles.average_precision(pred, gold, k)), abs=1e-12)

    @given(instances())
    def test_ordering_between_metrics(self, inst):
        pred, gold, k = inst
        r, s = recall_at_k(pred, gold, k), sensitivity_at_k(pred, gold, k)
        ap = average_precision(pred, gold, k)
        assert r <= s <= 1.0
        assert precision_at_k(pred, gold, k) <= 1.0
        assert ap <= s + 1e-15

    @given(instances(), st.randoms(use_true_random=False))
    def test_permutation_invariance(self, inst, rnd):
        pred, gold, k = inst
        shuffled = list(pred)
        rnd.shuffle(shuffled)
        for fn in (precision_at_k, recall_at_k, sensitivity_at_k, f1_at_k):
            assert fn(shuffled, gold, k) == fn(pred, gold, k)

    @given(instances())
    def test_appending_relevant_never_hurts(self, inst):
        pred, gold, k = inst
        extra = [g for g in sorted(gold) if g not in pred]
        if len(pred) >= k or not extra:
            return
        longer = list(pred) + [extra[0]]
        for fn in (precision_at_k, recall_at_k, sensitivity_at_k, f1_at_k, average_precision):
            assert fn(longer, gold, k) >= fn(pred, gold, k)

    def test_exact_gold_is_perfect(self):
        for fn in (precision_at_k, recall_at_k, sensitivity_at_k, f1_at_k, average_precision):
            assert fn(P5, set(P5), 5) == 1.0


class TestEvaluateRun:
    def test_map_is_mean_of_ap(self):
        run = {"r1": ranked("r1", ["a", "x1", "x2", "b", "x3"]), "r2": ranked("r2", ["x", "x2", "x3", "c", "x4"])}
        gold = {"r1": {"a", "b"}, "r2": {"c", "zz"}}
        report = evaluate_run(run, gold, 5, "m")
        assert [e.ap for e in report.per_requirement] == [0.75, 0.125]
        assert report.map == pytest.approx(0.4375)
        assert report.n_requirements_evaluated == 2

    def test_mean_of_two_aps(self):
        run = {"r1": ranked("r1", ["a", "b"]), "r2": ranked("r2", ["x", "c"])}
        gold = {"r1": {"a", "b"}, "r2": {"c", "d"}}
        # AP r1 = 1.0, AP r2 = (1/2)(1/2) = 0.25
        assert evaluate_run(run, gold, 5).map == pytest.approx(0.625)
        # AP r1 = 0.75, AP r2 = 0.25
        run = {"r1": ranked("r1", ["a", "x1", "x2", "b"]), "r2": ranked("r2", ["x", "c"])}
        assert evaluate_run(run, gold, 5).map == pytest.approx(0.5)

    def test_all_empty_gold(self):
        report = evaluate_run({}, {"r1": set(), "r2": set()}, 5)
        assert report.n_requirements_evaluated == 0 and report.n_excluded == 2
        assert report.map is None and not report.defined

    def test_missing_run_entry(self):
        with pytest.raises(MetricError, match="r2"):
            evaluate_run({"r1": ranked("r1", ["a"])}, {"r1": {"a"}, "r2": {"b"}}, 5)

    def test_pair_keys_and_breakdown(self):
        run = {("R1", "q"): ranked("q", ["a"]), ("R2", "q"): ranked("q", ["x"])}
        gold = {("R1", "q"): {"a"}, ("R2", "q"): {"b"}}
        report = evaluate_run(run, gold, 5)
        parts = report.by_report()
        assert parts["R1"].mean_sensitivity == 1.0 and parts["R2"].mean_sensitivity == 0.0
        assert report.mean_sensitivity == 0.5

    def test_twenty_requirement_fixture_against_oracle(self, tmp_path):
        rng = random.Random(2024)
        universe = [f"s{i}" for i in range(40)]
        run, gold = {}, {}
        for j in range(20):
            rid = f"r{j}"
            run[rid] = ranked(rid, rng.sample(universe, 5))
            gold[rid] = set(rng.sample(universe, rng.randint(1, 9)))
        report = evaluate_run(run, gold, 5, "fixture")
        for attr, fn in [
            ("mean_sensitivity", oracles.sensitivity),
            ("map", oracles.average_precision),
            ("mean_f1", oracles.f1),
            ("mean_precision", oracles.precision),
            ("mean_recall", oracles.recall),
        ]:
            expected = sum(fn(run[r].ids, gold[r], 5) for r in run) / 20
            assert getattr(report, attr) == pytest.approx(float(expected), abs=1e-12)
        write_per_requirement(tmp_path / "per.jsonl", report)
        lines = (tmp_path / "per.jsonl").read_text().splitlines()
        assert len(lines) == 20 and json.loads(lines[0])["requirement_id"] == "r0"
