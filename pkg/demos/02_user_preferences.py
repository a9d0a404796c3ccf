"""
Where a user's preferences come from
====================================

A user is described by triples reached from the items they clicked. Hop 0
holds the clicked items themselves; hop p follows KG edges p steps out.
The relation view weighs triples by relation, the entity view by tail.
"""
import json

import numpy as np

from mgacl import diffcore as dc
from mgacl.graphstore import (
    InteractionGraph,
    KnowledgeGraph,
    build_fused_graph,
    entity_frontier,
    sample_user_batch,
)
from mgacl.userrep import attention_dump, user_representation

# two films share a director; one of them has a genre
inter = InteractionGraph(num_users=1, num_items=2, edges=[(0, 0)])
kg = KnowledgeGraph(
    num_entities=5,
    num_relations=2,
    triples=[(0, 0, 2), (1, 0, 2), (0, 1, 3), (2, 1, 4)],
)
graph = build_fused_graph(inter, kg, {0: 0, 1: 1})

for p in range(3):
    print(f"hop {p} frontier of user 0:", sorted(entity_frontier(graph, 0, p)))

rng = np.random.default_rng(1)
rel, tail = sample_user_batch(graph, [0], n_hops=3, M=3, rng=rng)
print("sampled relations per hop:", rel[0].tolist())
print("sampled tails per hop:", tail[0].tolist())

store = dc.ParameterStore.init(1, graph.num_entities, graph.num_relations, 8, rng)
views = user_representation(
    store.user[[0]],
    store.relation[rel],
    store.entity[tail],
    store.entity[graph.item_to_entity[[1]]],
)
print(json.dumps(attention_dump(views, rel, tail), indent=1))
print("O_u =", np.round(views.o_u.data[0], 3))
