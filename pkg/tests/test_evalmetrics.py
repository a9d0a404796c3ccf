import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgacl.errors import MGACLError, UndefinedMetricError
from mgacl.evalmetrics import (
    MetricsReport,
    acc_f1,
    auc,
    evaluate,
    format_table,
    rank_items,
    recall_ndcg_at_k,
)

from oracles import auc_oracle, confusion_oracle, ranking_oracle


class TestAUC:
    def test_separated(self):
        assert auc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0

    def test_all_ties(self):
        assert auc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5

    def test_hand_case(self):
        scores, labels = [0.2, 0.6, 0.6, 0.4], [1, 1, 0, 0]
        # (0.2 vs .6, .4): 0 + 0; (0.6 vs .6, .4): 0.5 + 1
        assert auc(scores, labels) == pytest.approx(1.5 / 4) == auc_oracle(scores, labels)

    def test_single_class(self):
        with pytest.raises(UndefinedMetricError):
            auc([0.1, 0.2], [1, 1])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=60))
    def test_monotone_invariance(self, rows):
        scores = np.array([s for s, _ in rows], float)
        labels = np.array([y for _, y in rows], int)
        if labels.min() == labels.max():
            return
        base = auc(scores, labels)
        assert base == pytest.approx(auc_oracle(scores.tolist(), labels.tolist()), abs=1e-12)
        assert auc(np.exp(scores) * 3 - 7, labels) == pytest.approx(base, abs=1e-12)

    def test_random_scores_near_half(self):
        rng = np.random.default_rng(0)
        labels = np.repeat([0, 1], 5000)
        assert abs(auc(rng.random(10_000), labels) - 0.5) < 0.03


class TestAccF1:
    def test_all_correct(self):
        assert acc_f1([0.9, 0.1, 0.7], [1, 0, 1]) == (1.0, 1.0)

    def test_no_predicted_positives(self):
        assert acc_f1([0.1, 0.2], [1, 0])[1] == 0.0

    def test_confusion_case(self):
        # TP=2 FP=1 FN=1 TN=6
        scores = [0.9, 0.8, 0.7, 0.1] + [0.2] * 6
        labels = [1, 1, 0, 1] + [0] * 6
        acc, f1 = acc_f1(scores, labels)
        assert acc == pytest.approx(0.8, abs=1e-15)
        assert f1 == pytest.approx(2 / 3, abs=1e-15)

    def test_threshold_inclusive(self):
        assert acc_f1([0.5], [1]) == (1.0, 1.0)


class TestRanking:
    def test_ties_by_item_id(self):
        assert rank_items([7, 3, 5, 1], [0.5, 0.5, 0.9, 0.1]).tolist() == [5, 3, 7, 1]

    def test_all_hits(self):
        assert recall_ndcg_at_k([[1, 2, 3]], [{1, 2}], 3)[:2] == (1.0, 1.0)

    def test_no_hits(self):
        assert recall_ndcg_at_k([[4, 5]], [{1}], 2)[:2] == (0.0, 0.0)

    def test_five_item_hand(self):
        ranked = [10, 11, 12, 13, 14]
        relevant = {11, 14, 99}
        recall, ndcg, n = recall_ndcg_at_k([ranked], [relevant], 5)
        dcg = 1 / math.log2(3) + 1 / math.log2(6)
        idcg = 1 + 1 / math.log2(3) + 1 / math.log2(4)
        assert recall == pytest.approx(2 / 3) and ndcg == pytest.approx(dcg / idcg) and n == 1

    def test_empty_relevant_skipped(self):
        assert recall_ndcg_at_k([[1], [2]], [set(), {2}], 1) == (1.0, 1.0, 1)

    def test_rank_preserving_invariance(self):
        rng = np.random.default_rng(1)
        items = np.arange(30)
        s = rng.random(30)
        a = rank_items(items, s)
        b = rank_items(items, np.log(s) * 5 + 2)
        assert a.tolist() == b.tolist()


def test_oracle_equivalence_random_cases():
    rng = np.random.default_rng(7)
    for _ in range(200):
        n = int(rng.integers(2, 101))
        scores = np.round(rng.random(n), 2)
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        assert auc(scores, labels) == auc_oracle(scores.tolist(), labels.tolist())
        assert acc_f1(scores, labels) == confusion_oracle(scores.tolist(), labels.tolist())
        k = int(rng.integers(1, 25))
        items = rng.permutation(n)
        relevant = set(items[labels == 1].tolist())
        recall, ndcg, _ = recall_ndcg_at_k([rank_items(items, scores)], [relevant], k)
        o_recall, o_ndcg = ranking_oracle(list(zip(items.tolist(), scores.tolist())), relevant, k)
        assert recall == pytest.approx(o_recall, abs=1e-12) and ndcg == pytest.approx(o_ndcg, abs=1e-12)
        assert ndcg <= 1.0


class FakeGraph:
    num_items = 6


class LabelModel:
    """Scores each pair by its held-out label plus a tiny id-based jitter."""

    graph = FakeGraph()

    def __init__(self, positives):
        self.positives = positives

    def score(self, users, items):
        return np.array([0.9 if (u, v) in self.positives else 0.1 for u, v in zip(users, items)]) + 1e-6 * np.asarray(items)


def test_evaluate_schema_and_oracle_model():
    train = np.array([[0, 0, 1], [0, 5, 0], [1, 1, 1], [1, 2, 0]])
    held = np.array([[0, 3, 1], [0, 4, 0], [1, 2, 1], [1, 0, 0]])
    positives = {(0, 3), (1, 2)}
    report = evaluate(LabelModel(positives), held, train, k=2)
    assert report.auc == 1.0 and report.acc == 1.0 and report.f1 == 1.0
    assert report.recall_at_k == 1.0 and report.ndcg_at_k == 1.0
    assert report.num_users == 2 and report.num_pairs == 4 and report.k == 2
    data = json.loads(report.to_json())
    assert set(data) == {"auc", "acc", "f1", "recall_at_k", "ndcg_at_k", "k", "num_users", "num_pairs", "protocol"}
    assert all(0 <= data[f] <= 1 for f in ("auc", "acc", "f1", "recall_at_k", "ndcg_at_k"))


def test_evaluate_excludes_train_positives():
    class Favours0(LabelModel):
        def score(self, users, items):
            return np.where(np.asarray(items) == 0, 0.99, 0.1 + 0.01 * np.asarray(items))

    train = np.array([[0, 0, 1]])
    held = np.array([[0, 5, 1], [0, 1, 0]])
    # item 0 is a train positive, so item 5 ranks first
    assert evaluate(Favours0(set()), held, train, k=1).recall_at_k == 1.0


def test_evaluate_empty():
    with pytest.raises(MGACLError):
        evaluate(LabelModel(set()), np.zeros((0, 3)), np.zeros((0, 3)))


def test_format_table():
    r = MetricsReport(0.9, 0.8, 0.7, 0.25, 0.3, 20, 5, 10)
    text = format_table({"MGACL": r, "w/o cl": r})
    rows = text.splitlines()
    assert rows[0].split() == ["model", "AUC", "ACC", "F1", "Recall@20", "NDCG@20"]
    assert rows[1].split()[1:] == ["0.9000", "0.8000", "0.7000", "0.2500", "0.3000"]
    assert len(rows) == 3
