"""
Item neighborhoods from the outside in
======================================

Each item roots a sampled tree of KG neighbors. The deepest level is folded
into its parents first; the root keeps its own embedding (o_c) and the
aggregated neighborhood (o_s) side by side.
"""
import json

import numpy as np

from mgacl import diffcore as dc
from mgacl.graphstore import InteractionGraph, KnowledgeGraph, build_fused_graph
from mgacl.itemrep import neighborhood_trace, propagate

triples = [(0, 0, 1), (0, 1, 2), (1, 0, 3), (2, 1, 3), (3, 0, 0), (1, 1, 2)]
graph = build_fused_graph(InteractionGraph(1, 1, [(0, 0)]), KnowledgeGraph(4, 2, triples), {0: 0})

rng = np.random.default_rng(3)
store = dc.ParameterStore.init(1, graph.num_entities, graph.num_relations, 6, rng)
views, (ent_ids, rel_ids) = propagate(store, graph, store.user[0], [0], depth=2, N=2, rng=rng)

print(json.dumps(neighborhood_trace(views, ent_ids, rel_ids, N=2), indent=1))
print("o_c", np.round(views.o_c.data[0], 3))
print("o_s", np.round(views.o_s.data[0], 3))

# without the GCN the item is just its own entity embedding
plain, _ = propagate(store, graph, store.user[0], [0], depth=2, N=2, rng=rng, use_gcn=False)
print("w/o gcn equals raw embedding:", np.array_equal(plain.o_v.data[0], store.entity[0]))
