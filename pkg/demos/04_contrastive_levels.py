"""
Three contrastive signals
=========================

InfoNCE pulls an anchor towards its positive and away from in-batch
negatives. We first check its limits, then compute the intra-, inter- and
interaction-level losses on one real batch.
"""
import math

import numpy as np

from mgacl.contrastive import BatchViews, info_nce, inter_level, interaction_level, intra_level
from mgacl.synthetic import SyntheticSpec, make_synthetic
from mgacl.trainer import TrainConfig, forward, sample_batch
from mgacl import diffcore as dc

a, p = np.array([1.0, 0.0]), np.array([0.5, 0.5])
print("no negatives:", info_nce(a, p, [], tau=0.2).item())
for k in (1, 4, 16):
    loss = info_nce(a, p, [(a, p)] * k, tau=0.2).item()
    print(f"{k} copies of the positive as negatives: {loss:.12f}  log(k+1) = {math.log(k + 1):.12f}")

data = make_synthetic(seed=0, spec=SyntheticSpec(n_users=60, n_items=60, n_entities=150, n_clusters=4), k=3)
cfg = TrainConfig(l_p=1, l_h=1, M=8, N=4, dim=16)
pairs = data.split.train[:32]
rng = np.random.default_rng(0)
batch = sample_batch(data.graph, pairs[:, 0], pairs[:, 1], pairs[:, 2], cfg, rng)
store = dc.ParameterStore.init(data.graph.num_users, data.graph.num_entities, data.graph.num_relations, 16, rng)
user, item, e_u, e_v = forward(dict(store.items()), data.graph, batch, cfg)

print("in-batch negatives per row (mean):", batch.neg_mask.sum(1).mean())
for tau in (0.1, 0.2, 0.5):
    views = BatchViews(user, item, e_u, e_v, batch.labels, batch.neg_mask, tau)
    print(
        f"tau={tau}: intra {intra_level(views).item():.3f}"
        f"  inter {inter_level(views, 0.1, np.random.default_rng(1)).item():.3f}"
        f"  interaction {interaction_level(views).item():.3f}"
    )
