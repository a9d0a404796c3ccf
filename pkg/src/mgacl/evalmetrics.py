"""CTR metrics (AUC, ACC, F1) and top-K ranking metrics (Recall@K, NDCG@K)."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import MGACLError, UndefinedMetricError

__all__ = [
    "ScoredPair",
    "MetricsReport",
    "auc",
    "acc_f1",
    "recall_ndcg_at_k",
    "rank_items",
    "evaluate",
    "format_table",
]

PROTOCOL = (
    "CTR metrics on labeled eval pairs (threshold 0.5); ranking metrics over the "
    "full item catalog minus each user's train positives, ties by ascending item id"
)


@dataclass(frozen=True)
class ScoredPair:
    user_id: int
    item_id: int
    score: float
    label: int


@dataclass
class MetricsReport:
    auc: float
    acc: float
    f1: float
    recall_at_k: float
    ndcg_at_k: float
    k: int
    num_users: int
    num_pairs: int
    protocol: str = PROTOCOL

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied positive/negative pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def acc_f1(scores, labels, threshold: float = 0.5) -> tuple[float, float]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if not len(labels):
        return 0.0, 0.0
    pred = scores >= threshold
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    acc = float(np.mean(pred == labels))
    # F1 = 2PR / (P + R) = 2TP / (2TP + FP + FN), and 0 when P + R = 0
    f1 = 2.0 * tp / (2 * tp + fp + fn) if tp else 0.0
    return acc, f1


def rank_items(item_ids, scores) -> np.ndarray:
    """Items by descending score, ties broken by ascending item id."""
    item_ids = np.asarray(item_ids)
    scores = np.asarray(scores, dtype=np.float64)
    return item_ids[np.lexsort((item_ids, -scores))]


def recall_ndcg_at_k(ranked_lists, relevant_sets, k: int) -> tuple[float, float, int]:
    """Mean Recall@k and NDCG@k over users with a non-empty relevant set.

    Returns ``(recall, ndcg, users_evaluated)``.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    recalls, ndcgs = [], []
    for ranked, relevant in zip(ranked_lists, relevant_sets):
        relevant = set(relevant)
        if not relevant:
            continue
        hits = np.array([item in relevant for item in list(ranked)[:k]], dtype=np.float64)
        recalls.append(hits.sum() / len(relevant))
        idcg = discounts[: min(k, len(relevant))].sum()
        ndcgs.append(float(np.dot(hits, discounts[: len(hits)])) / idcg)
    if not recalls:
        return 0.0, 0.0, 0
    return float(np.mean(recalls)), float(np.mean(ndcgs)), len(recalls)


def evaluate(model, eval_pairs, train_pairs, k: int = 20) -> MetricsReport:
    """Score labeled ``eval_pairs`` and rank the full catalog for each eval user.

    ``model`` needs ``score(users, items)`` and a ``graph`` with ``num_items``.
    Pairs are rows of ``(user, item, label)``.
    """
    eval_pairs = np.asarray(eval_pairs, dtype=np.int64)
    if not len(eval_pairs):
        raise MGACLError("evaluation split is empty")
    train_pairs = np.asarray(train_pairs, dtype=np.int64).reshape(-1, 3)
    scores = model.score(eval_pairs[:, 0], eval_pairs[:, 1])
    labels = eval_pairs[:, 2]
    a = auc(scores, labels)
    acc, f1 = acc_f1(scores, labels)

    num_items = model.graph.num_items
    seen = {}
    for u, v, y in train_pairs:
        if y == 1:
            seen.setdefault(int(u), set()).add(int(v))
    relevant = {}
    for u, v, y in eval_pairs:
        if y == 1:
            relevant.setdefault(int(u), set()).add(int(v))
    users = sorted(relevant)
    ranked, rel_sets = [], []
    all_items = np.arange(num_items)
    for u in users:
        cand = np.setdiff1d(all_items, np.fromiter(seen.get(u, ()), dtype=np.int64))
        s = model.score(np.full(len(cand), u), cand)
        ranked.append(rank_items(cand, s)[:k])
        rel_sets.append(relevant[u])
    recall, ndcg, n_users = recall_ndcg_at_k(ranked, rel_sets, k)
    return MetricsReport(a, acc, f1, recall, ndcg, k, n_users, len(eval_pairs))


def format_table(rows: dict[str, MetricsReport]) -> str:
    """Aligned text table: one row per run, CTR and ranking columns."""
    k = next(iter(rows.values())).k if rows else 20
    header = ["model", "AUC", "ACC", "F1", f"Recall@{k}", f"NDCG@{k}"]
    body = [
        [name, f"{r.auc:.4f}", f"{r.acc:.4f}", f"{r.f1:.4f}", f"{r.recall_at_k:.4f}", f"{r.ndcg_at_k:.4f}"]
        for name, r in rows.items()
    ]
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in [header] + body]
    return "\n".join(lines) + "\n"
