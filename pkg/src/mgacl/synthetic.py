"""Planted-cluster datasets for smoke tests and learning checks.

Items and attribute entities are split into clusters; the KG links each
item mostly to attributes of its own cluster, and each user clicks mostly
items of one cluster. The output goes through the regular ingest pipeline.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ingest import Prepared, prepare


@dataclass
class SyntheticSpec:
    n_users: int = 200
    n_items: int = 200
    n_entities: int = 500
    n_relations: int = 6
    n_clusters: int = 8
    clicks_per_user: int = 15
    noise_clicks: int = 1
    item_links: int = 3
    attribute_links: int = 2
    kg_noise: float = 0.1
    low_ratings: int = 2


def synthetic_lines(spec: SyntheticSpec, seed: int):
    """Raw ``(interactions, kg, alignment)`` TSV lines for ``spec``."""
    if spec.n_entities <= spec.n_items:
        raise ValueError("need more entities than items to host attributes")
    rng = np.random.default_rng(seed)
    C = spec.n_clusters
    item_cluster = np.arange(spec.n_items) % C
    attrs = np.arange(spec.n_items, spec.n_entities)
    attr_cluster = attrs % C
    by_cluster = [attrs[attr_cluster == c] for c in range(C)]
    items_by_cluster = [np.flatnonzero(item_cluster == c) for c in range(C)]

    def pick_attr(c):
        if rng.random() < spec.kg_noise:
            return int(rng.choice(attrs))
        return int(rng.choice(by_cluster[c]))

    kg = []
    for i in range(spec.n_items):
        c = item_cluster[i]
        for _ in range(spec.item_links):
            kg.append((f"e{i}", f"r{rng.integers(spec.n_relations)}", f"e{pick_attr(c)}"))
    for a, c in zip(attrs, attr_cluster):
        for _ in range(spec.attribute_links):
            kg.append((f"e{a}", f"r{rng.integers(spec.n_relations)}", f"e{pick_attr(c)}"))

    inter = []
    user_cluster = np.arange(spec.n_users) % C
    for u in range(spec.n_users):
        own = items_by_cluster[user_cluster[u]]
        take = min(spec.clicks_per_user, len(own))
        clicked = set(rng.choice(own, size=take, replace=False).tolist())
        others = np.setdiff1d(np.arange(spec.n_items), own)
        clicked |= set(rng.choice(others, size=spec.noise_clicks, replace=False).tolist())
        for i in sorted(clicked):
            inter.append((f"u{u}", f"i{i}", float(rng.integers(4, 6))))
        unclicked = np.setdiff1d(np.arange(spec.n_items), sorted(clicked))
        for i in rng.choice(unclicked, size=min(spec.low_ratings, len(unclicked)), replace=False):
            inter.append((f"u{u}", f"i{i}", float(rng.integers(1, 3))))

    interactions = [f"{u}\t{i}\t{r:g}\n" for u, i, r in inter]
    kg_lines = [f"{h}\t{r}\t{t}\n" for h, r, t in kg]
    # entities that never occur in a triple cannot be aligned; those items stay isolated
    seen = {h for h, _, _ in kg} | {t for _, _, t in kg}
    alignment = [f"i{i}\te{i}\n" for i in range(spec.n_items) if f"e{i}" in seen]
    return interactions, kg_lines, alignment


def make_synthetic(seed: int = 0, spec: SyntheticSpec | None = None, k: int = 5,
                   eval_fraction: float = 0.2, neg_ratio: int = 1) -> Prepared:
    spec = spec or SyntheticSpec()
    inter, kg, alignment = synthetic_lines(spec, seed)
    return prepare(inter, kg, alignment, threshold=4.0, k=k, eval_fraction=eval_fraction,
                   neg_ratio=neg_ratio, seed=seed)


def write_synthetic(directory, seed: int = 0, spec: SyntheticSpec | None = None):
    """Write ``interactions.tsv``, ``kg.tsv`` and ``alignment.tsv`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, lines in zip(("interactions.tsv", "kg.tsv", "alignment.tsv"),
                           synthetic_lines(spec or SyntheticSpec(), seed)):
        (directory / name).write_text("".join(lines), encoding="utf-8")
    return directory
