"""User-conditioned item representation by attentive propagation over the
item's sampled knowledge-graph tree, from the leaves towards the root."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ConfigError
from .graphstore import FusedGraph, sample_item_tree

__all__ = [
    "ItemViews",
    "triple_score",
    "normalize_scores",
    "aggregate_neighborhood",
    "propagate_tree",
    "propagate",
    "neighborhood_trace",
]


@dataclass
class ItemViews:
    o_c: dc.Tensor  # central entity
    o_s: dc.Tensor  # aggregated neighborhood
    o_v: dc.Tensor
    level_weights: list | None = None


def triple_score(u_vec, r_vec, t_vec, w, b) -> dc.Tensor:
    """``w . (u + r + t) + b``, broadcasting over leading axes."""
    return dc.add(dc.dot(dc.add(dc.add(u_vec, r_vec), t_vec), w), b)


def normalize_scores(scores) -> dc.Tensor:
    return dc.softmax(scores)


def aggregate_neighborhood(weights, tail_vecs) -> dc.Tensor:
    return dc.weighted_sum(weights, tail_vecs)


def propagate_tree(u_vec, entity_levels, relation_levels, w, b, N: int, use_gcn: bool = True) -> ItemViews:
    """Propagate a sampled tree of depth ``len(entity_levels) - 1``.

    ``entity_levels[h]`` holds the embeddings of level ``h`` with shape
    ``(B, N**h, d)``; ``relation_levels[h]`` (``h >= 1``) holds the embedding
    of the relation linking each level-``h`` node to its parent. ``u_vec`` is
    ``(B, d)``. Each level is folded into its parent as
    ``parent <- parent + sum_i softmax(score)_i * child_i`` where children
    already carry their own updated vectors.
    """
    root = entity_levels[0]
    B, _, d = root.shape
    o_c = dc.reshape(root, (B, d))
    if not use_gcn:
        zero = dc.Tensor(np.zeros((B, d)))
        return ItemViews(o_c=o_c, o_s=zero, o_v=o_c, level_weights=[])
    depth = len(entity_levels) - 1
    if depth < 1:
        raise ConfigError("item tree depth must be >= 1")
    u = dc.reshape(u_vec, (B, 1, 1, d))
    current = entity_levels[depth]
    weights_by_level = [None] * (depth + 1)
    for h in range(depth - 1, -1, -1):
        width = N**h
        children = dc.reshape(current, (B, width, N, d))
        rel = dc.reshape(relation_levels[h + 1], (B, width, N, d))
        weights = normalize_scores(triple_score(u, rel, children, w, b))
        weights_by_level[h + 1] = weights
        neighborhood = aggregate_neighborhood(weights, children)
        if h == 0:
            o_s = dc.reshape(neighborhood, (B, d))
        else:
            current = dc.add(neighborhood, entity_levels[h])
    return ItemViews(o_c=o_c, o_s=o_s, o_v=dc.add(o_c, o_s), level_weights=weights_by_level)


def _embed_tree(store_tables, entity_ids, relation_ids):
    entity_table, relation_table = store_tables
    ents = [dc.gather_rows(entity_table, ids) for ids in entity_ids]
    rels = [None] + [dc.gather_rows(relation_table, ids) for ids in relation_ids[1:]]
    return ents, rels


def propagate(store, graph: FusedGraph, u_vec, item_ids, depth: int, N: int, rng, use_gcn: bool = True):
    """Sample trees for ``item_ids`` and propagate them without gradient tracking.

    Returns ``(ItemViews, (entity_ids, relation_ids))``.
    """
    if depth < 1:
        raise ConfigError(f"l_h must be >= 1, got {depth}")
    roots = graph.item_to_entity[np.asarray(item_ids, dtype=np.int64).reshape(-1)]
    ent_ids, rel_ids = sample_item_tree(graph, roots, depth, N, rng)
    ents, rels = _embed_tree((store.entity, store.relation), ent_ids, rel_ids)
    u = np.asarray(u_vec, dtype=np.float64).reshape(len(roots), -1)
    views = propagate_tree(u, ents, rels, store.gcn_w, store.gcn_b, N, use_gcn)
    return views, (ent_ids, rel_ids)


def neighborhood_trace(views: ItemViews, entity_ids, relation_ids, N: int, index: int = 0) -> dict:
    """Nested JSON-ready tree ``{entity, children: [{entity, relation, weight, children}]}``."""

    def node(level, pos):
        out = {"entity": int(entity_ids[level][index, pos])}
        if level + 1 < len(entity_ids) and views.level_weights:
            weights = views.level_weights[level + 1].data[index, pos]
            out["children"] = [
                {
                    **node(level + 1, pos * N + i),
                    "relation": int(relation_ids[level + 1][index, pos * N + i]),
                    "weight": float(weights[i]),
                }
                for i in range(N)
            ]
        return out

    return node(0, 0)
