"""User representation from relation-view and entity-view attention.

All functions are batched: trailing axes carry ``(hops, M, d)`` for triple
embeddings and ``d`` for vectors, and any leading batch axes broadcast.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ShapeError

__all__ = [
    "UserViews",
    "relation_attention",
    "entity_attention",
    "aggregate_relation_view",
    "aggregate_entity_view",
    "user_representation",
    "attention_dump",
]


@dataclass
class UserViews:
    o_r: dc.Tensor
    o_e: dc.Tensor
    o_u: dc.Tensor
    o_r_hops: dc.Tensor | None = None
    o_e_hops: dc.Tensor | None = None
    relation_weights: dc.Tensor | None = None
    entity_weights: tuple | None = None


def _nonempty(embs):
    if embs.shape[-2] == 0:
        raise ShapeError("preference set is empty")


def relation_attention(u_vec, relation_embs) -> dc.Tensor:
    """Softmax over triples of ``u . r_i``; ``relation_embs`` is ``(..., M, d)``."""
    u_vec, relation_embs = dc._lift(u_vec), dc._lift(relation_embs)
    _nonempty(relation_embs)
    return dc.softmax(dc.matvec(relation_embs, _expand_like(u_vec, relation_embs)))


def entity_attention(u_vec, v_vec, tail_embs):
    """Two independent softmaxes of ``u . t_i`` and ``v . t_i`` over the triples."""
    u_vec, v_vec, tail_embs = dc._lift(u_vec), dc._lift(v_vec), dc._lift(tail_embs)
    _nonempty(tail_embs)
    w_u = dc.softmax(dc.matvec(tail_embs, _expand_like(u_vec, tail_embs)))
    w_v = dc.softmax(dc.matvec(tail_embs, _expand_like(v_vec, tail_embs)))
    return w_u, w_v


def _expand_like(vec, embs):
    # (B, d) against (B, H, M, d): insert the hop axis so matvec broadcasts over it.
    extra = embs.ndim - 1 - vec.ndim
    if extra > 0 and vec.ndim > 1:
        shape = vec.shape[:-1] + (1,) * extra + vec.shape[-1:]
        return dc.reshape(vec, shape)
    return vec


def aggregate_relation_view(weights, tail_embs):
    """Per-hop weighted tail sums and their total over hops.

    ``weights`` is ``(..., H, M)``, ``tail_embs`` ``(..., H, M, d)``; returns
    ``(O_u^r, per_hop)`` with ``per_hop`` of shape ``(..., H, d)``.
    """
    per_hop = dc.weighted_sum(weights, tail_embs)
    return _sum_hops(per_hop), per_hop


def aggregate_entity_view(weights_u, weights_v, tail_embs):
    """Like :func:`aggregate_relation_view` with combined weights ``w_u + w_v``."""
    per_hop = dc.weighted_sum(dc.add(weights_u, weights_v), tail_embs)
    return _sum_hops(per_hop), per_hop


def _sum_hops(per_hop):
    return dc.sum_(per_hop, axis=-2)


def user_representation(
    u_vec,
    relation_embs,
    tail_embs,
    v_vec,
    use_relation_view: bool = True,
    use_entity_view: bool = True,
) -> UserViews:
    """Combine both views with the base embedding: ``O_u = u + O_u^r + O_u^e``.

    ``relation_embs`` and ``tail_embs`` hold hops ``0..l_p`` as ``(..., H, M, d)``.
    A disabled view contributes a zero vector.
    """
    u_vec = dc._lift(u_vec)
    relation_embs, tail_embs = dc._lift(relation_embs), dc._lift(tail_embs)
    zero = dc.Tensor(np.zeros(u_vec.shape))
    views = UserViews(o_r=zero, o_e=zero, o_u=u_vec)
    o_u = u_vec
    if use_relation_view:
        w_r = relation_attention(u_vec, relation_embs)
        views.o_r, views.o_r_hops = aggregate_relation_view(w_r, tail_embs)
        views.relation_weights = w_r
        o_u = dc.add(o_u, views.o_r)
    if use_entity_view:
        w_u, w_v = entity_attention(u_vec, v_vec, tail_embs)
        views.o_e, views.o_e_hops = aggregate_entity_view(w_u, w_v, tail_embs)
        views.entity_weights = (w_u, w_v)
        o_u = dc.add(o_u, views.o_e)
    views.o_u = o_u
    return views


def attention_dump(views: UserViews, relations, tails, index: int = 0) -> dict:
    """JSON-ready ``{hop: [{relation, tail, w_rel, w_ent_u, w_ent_v}, ...]}`` for one example."""
    relations = np.asarray(relations)[index]
    tails = np.asarray(tails)[index]
    out = {}
    for hop in range(relations.shape[0]):
        rows = []
        for i in range(relations.shape[1]):
            row = {"relation": int(relations[hop, i]), "tail": int(tails[hop, i])}
            if views.relation_weights is not None:
                row["w_rel"] = float(views.relation_weights.data[index, hop, i])
            if views.entity_weights is not None:
                row["w_ent_u"] = float(views.entity_weights[0].data[index, hop, i])
                row["w_ent_v"] = float(views.entity_weights[1].data[index, hop, i])
            rows.append(row)
        out[str(hop)] = rows
    return out
