"""Fused user-item-entity graph, hop frontiers and neighborhood sampling."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, ColdStartError, ConfigError, NotFoundError

__all__ = [
    "InteractionGraph",
    "KnowledgeGraph",
    "FusedGraph",
    "PreferenceSet",
    "SampledItemNeighborhood",
    "build_fused_graph",
    "entity_frontier",
    "sample_preference_set",
    "sample_item_neighborhood",
    "sample_rows",
]


def _csr(keys, n):
    """Order and offsets that group ``range(len(keys))`` by key."""
    keys = np.asarray(keys, dtype=np.int64)
    order = np.argsort(keys, kind="stable")
    counts = np.bincount(keys, minlength=n) if keys.size else np.zeros(n, dtype=np.int64)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return order, offsets


class InteractionGraph:
    """Observed clicks as a bipartite graph (every stored edge has y_uv = 1)."""

    def __init__(self, num_users: int, num_items: int, edges):
        edges = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges,
                           dtype=np.int64).reshape(-1, 2)
        if edges.size:
            if edges.min() < 0 or edges[:, 0].max() >= num_users or edges[:, 1].max() >= num_items:
                raise ValueError("interaction edge references an out-of-range id")
            edges = np.unique(edges, axis=0)
        self.num_users = int(num_users)
        self.num_items = int(num_items)
        self.edges = edges
        order, self._user_offsets = _csr(edges[:, 0], num_users)
        self._user_items = edges[order, 1]
        order, self._item_offsets = _csr(edges[:, 1], num_items)
        self._item_users = edges[order, 0]
        self._keys = edges[:, 0] * max(num_items, 1) + edges[:, 1]  # sorted by np.unique

    def __len__(self):
        return len(self.edges)

    def items_of(self, user_id: int) -> np.ndarray:
        if not 0 <= user_id < self.num_users:
            raise NotFoundError(f"unknown user {user_id}")
        return self._user_items[self._user_offsets[user_id]:self._user_offsets[user_id + 1]]

    def users_of(self, item_id: int) -> np.ndarray:
        if not 0 <= item_id < self.num_items:
            raise NotFoundError(f"unknown item {item_id}")
        return self._item_users[self._item_offsets[item_id]:self._item_offsets[item_id + 1]]

    def user_degrees(self) -> np.ndarray:
        return np.diff(self._user_offsets)

    def item_degrees(self) -> np.ndarray:
        return np.diff(self._item_offsets)

    def has_edges(self, users, items) -> np.ndarray:
        """Vectorized membership test for (user, item) pairs."""
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        keys = users * max(self.num_items, 1) + items
        if not self._keys.size:
            return np.zeros(keys.shape, dtype=bool)
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, self._keys.size - 1)
        return self._keys[pos] == keys


class KnowledgeGraph:
    """Directed multigraph of (head, relation, tail) triples with a per-head index."""

    def __init__(self, num_entities: int, num_relations: int, triples):
        triples = np.asarray(
            list(triples) if not isinstance(triples, np.ndarray) else triples, dtype=np.int64
        ).reshape(-1, 3)
        if triples.size:
            h, r, t = triples.T
            if min(h.min(), r.min(), t.min()) < 0 or max(h.max(), t.max()) >= num_entities \
                    or r.max() >= num_relations:
                raise ValueError("triple references an out-of-range id")
        self.num_entities = int(num_entities)
        self.num_relations = int(num_relations)
        self.triples = triples
        order, self.head_offsets = _csr(triples[:, 0], num_entities)
        self.head_order = order

    def __len__(self):
        return len(self.triples)

    def out_triples(self, entity_id: int) -> np.ndarray:
        """All triples whose head is ``entity_id`` as a ``(k, 3)`` array."""
        lo, hi = self.head_offsets[entity_id], self.head_offsets[entity_id + 1]
        return self.triples[self.head_order[lo:hi]]

    def out_degrees(self) -> np.ndarray:
        return np.diff(self.head_offsets)


@dataclass(frozen=True)
class PreferenceSet:
    """Sampled hop-``hop`` triples of a user.

    At hop 0 the head slot holds the user id and the relation is the click
    relation; at later hops every field is an entity/relation id.
    """

    user_id: int
    hop: int
    triples: np.ndarray  # (M, 3)

    @property
    def relations(self):
        return self.triples[:, 1]

    @property
    def tails(self):
        return self.triples[:, 2]


@dataclass(frozen=True)
class SampledItemNeighborhood:
    entity_id: int
    hop: int
    triples: np.ndarray  # (N, 3)


@dataclass
class FusedGraph:
    """Interactions plus KG joined through item to entity alignment.

    ``click_relation`` is one past the last KG relation id and therefore
    never collides with a KG relation.
    """

    interactions: InteractionGraph
    kg: KnowledgeGraph
    item_to_entity: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def click_relation(self) -> int:
        return self.kg.num_relations

    @property
    def num_users(self):
        return self.interactions.num_users

    @property
    def num_items(self):
        return self.interactions.num_items

    @property
    def num_entities(self):
        return self.kg.num_entities

    @property
    def num_relations(self):
        return self.kg.num_relations

    def user_candidates(self, user_id: int, hop: int) -> np.ndarray:
        """Candidate triples for ``S_u^hop`` as an ``(n, 3)`` array (cached)."""
        key = (user_id, hop)
        cand = self._cache.get(key)
        if cand is None:
            if hop == 0:
                ents = self.item_to_entity[self.interactions.items_of(user_id)]
                cand = np.stack(
                    [np.full(len(ents), user_id), np.full(len(ents), self.click_relation), ents],
                    axis=1,
                ).astype(np.int64)
            else:
                frontier = np.sort(np.fromiter(entity_frontier(self, user_id, hop - 1), dtype=np.int64))
                rows = [self.kg.head_order[self.kg.head_offsets[e]:self.kg.head_offsets[e + 1]]
                        for e in frontier]
                idx = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
                cand = self.kg.triples[idx].reshape(-1, 3)
            self._cache[key] = cand
        return cand


def build_fused_graph(interactions: InteractionGraph, kg: KnowledgeGraph, alignment: dict) -> FusedGraph:
    """Join ``interactions`` and ``kg``; unaligned items get fresh isolated entities."""
    mapping = np.full(interactions.num_items, -1, dtype=np.int64)
    seen = {}
    for item, ent in alignment.items():
        item, ent = int(item), int(ent)
        if not 0 <= item < interactions.num_items:
            raise AlignmentError(f"alignment references unknown item {item}")
        if not 0 <= ent < kg.num_entities:
            raise AlignmentError(f"alignment references unknown entity {ent}")
        if ent in seen and seen[ent] != item:
            raise AlignmentError(f"items {seen[ent]} and {item} both align to entity {ent}")
        seen[ent] = item
        mapping[item] = ent
    missing = np.flatnonzero(mapping < 0)
    mapping[missing] = kg.num_entities + np.arange(len(missing))
    if len(missing):
        kg = KnowledgeGraph(kg.num_entities + len(missing), kg.num_relations, kg.triples)
    return FusedGraph(interactions, kg, mapping)


def entity_frontier(g: FusedGraph, user_id: int, p: int) -> set:
    """Exact ``p``-hop entity set of a user (no sampling)."""
    if p < 0:
        raise ConfigError(f"hop must be >= 0, got {p}")
    items = g.interactions.items_of(user_id)
    frontier = np.unique(g.item_to_entity[items])
    kg = g.kg
    for _ in range(p):
        if not frontier.size:
            break
        tails = [kg.triples[kg.head_order[kg.head_offsets[e]:kg.head_offsets[e + 1]], 2] for e in frontier]
        frontier = np.unique(np.concatenate(tails))
    return set(frontier.tolist())


def sample_rows(counts, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``size`` local indices for each row with ``counts[k]`` candidates.

    Rows with at least ``size`` candidates are sampled uniformly without
    replacement (Floyd's algorithm, then shuffled); shorter rows are sampled
    uniformly with replacement. Returns an ``(len(counts), size)`` array.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if size < 1:
        raise ConfigError(f"sample size must be >= 1, got {size}")
    if np.any(counts < 1):
        raise ColdStartError("cannot sample from an empty candidate set")
    k = len(counts)
    out = np.empty((k, size), dtype=np.int64)
    short = counts < size
    if short.any():
        out[short] = np.floor(rng.random((int(short.sum()), size)) * counts[short, None]).astype(np.int64)
    full = ~short
    if full.any():
        n = counts[full]
        rows = int(full.sum())
        chosen = np.empty((rows, size), dtype=np.int64)
        draws = rng.random((rows, size))
        for i in range(size):
            j = n - size + i
            t = np.floor(draws[:, i] * (j + 1)).astype(np.int64)
            clash = (chosen[:, :i] == t[:, None]).any(axis=1)
            chosen[:, i] = np.where(clash, j, t)
        order = np.argsort(rng.random((rows, size)), axis=1)
        out[full] = np.take_along_axis(chosen, order, axis=1)
    return out


def sample_preference_set(g: FusedGraph, user_id: int, p: int, M: int, rng) -> PreferenceSet:
    if M < 1:
        raise ConfigError(f"M must be >= 1, got {M}")
    if not 0 <= user_id < g.num_users:
        raise NotFoundError(f"unknown user {user_id}")
    cand = g.user_candidates(user_id, p)
    if not len(cand):
        raise ColdStartError(f"user {user_id} has no candidate triples at hop {p}")
    idx = sample_rows([len(cand)], M, rng)[0]
    return PreferenceSet(user_id, p, cand[idx])


def sample_item_neighborhood(g: FusedGraph, entity_id: int, N: int, rng, hop: int = 0) -> SampledItemNeighborhood:
    if N < 1:
        raise ConfigError(f"N must be >= 1, got {N}")
    if not 0 <= entity_id < g.num_entities:
        raise NotFoundError(f"unknown entity {entity_id}")
    triples = _sample_neighbors(g, np.array([entity_id]), N, rng)[0]
    return SampledItemNeighborhood(entity_id, hop, triples)


def _sample_neighbors(g: FusedGraph, entities: np.ndarray, N: int, rng) -> np.ndarray:
    """Batched neighborhood draw: ``(k,) -> (k, N, 3)`` triples.

    Isolated entities get ``N`` self-loops under the click relation.
    """
    kg = g.kg
    entities = np.asarray(entities, dtype=np.int64).reshape(-1)
    deg = kg.head_offsets[entities + 1] - kg.head_offsets[entities]
    out = np.empty((len(entities), N, 3), dtype=np.int64)
    isolated = deg == 0
    if isolated.any():
        e = entities[isolated][:, None]
        out[isolated, :, 0] = e
        out[isolated, :, 1] = g.click_relation
        out[isolated, :, 2] = e
    live = ~isolated
    if live.any():
        local = sample_rows(deg[live], N, rng)
        pos = kg.head_offsets[entities[live]][:, None] + local
        out[live] = kg.triples[kg.head_order[pos]]
    return out


def _hop_table(g: FusedGraph, hop: int):
    """Candidates of every user at ``hop`` packed as CSR ``(offsets, triples)``."""
    key = ("hop_table", hop)
    table = g._cache.get(key)
    if table is None:
        cands = [g.user_candidates(u, hop) for u in range(g.num_users)]
        offsets = np.zeros(g.num_users + 1, dtype=np.int64)
        np.cumsum([len(c) for c in cands], out=offsets[1:])
        packed = np.concatenate(cands).reshape(-1, 3) if cands else np.zeros((0, 3), np.int64)
        table = (offsets, packed)
        g._cache[key] = table
    return table


def sample_user_batch(g: FusedGraph, users, n_hops: int, M: int, rng):
    """Preference sets for a batch: relation and tail ids of shape ``(B, n_hops, M)``.

    ``n_hops`` counts hop 0, so hops ``0..n_hops-1`` are drawn. Raises
    :class:`ColdStartError` if any user lacks candidates at some hop.
    """
    users = np.asarray(users, dtype=np.int64)
    rel = np.empty((len(users), n_hops, M), dtype=np.int64)
    tail = np.empty_like(rel)
    for hop in range(n_hops):
        offsets, packed = _hop_table(g, hop)
        counts = offsets[users + 1] - offsets[users]
        if np.any(counts == 0):
            bad = int(users[np.argmax(counts == 0)])
            raise ColdStartError(f"user {bad} has no candidate triples at hop {hop}")
        picked = packed[offsets[users][:, None] + sample_rows(counts, M, rng)]
        rel[:, hop] = picked[..., 1]
        tail[:, hop] = picked[..., 2]
    return rel, tail


def usable_users(g: FusedGraph, n_hops: int) -> np.ndarray:
    """Boolean mask of users with non-empty candidates at every hop ``< n_hops``."""
    mask = np.ones(g.num_users, dtype=bool)
    for hop in range(n_hops):
        offsets, _ = _hop_table(g, hop)
        mask &= np.diff(offsets) > 0
    return mask


def sample_item_tree(g: FusedGraph, root_entities, depth: int, N: int, rng):
    """Sampled receptive field of each root, level by level.

    Returns ``(entities, relations)`` where ``entities[h]`` has shape
    ``(B, N**h)`` for ``h = 0..depth`` and ``relations[h]`` (``h >= 1``) holds
    the relation of the edge from each level-``h`` node to its parent.
    """
    roots = np.asarray(root_entities, dtype=np.int64)
    B = len(roots)
    entities = [roots[:, None]]
    relations = [None]
    for h in range(1, depth + 1):
        parents = entities[-1].reshape(-1)
        trip = _sample_neighbors(g, parents, N, rng)
        entities.append(trip[:, :, 2].reshape(B, -1))
        relations.append(trip[:, :, 1].reshape(B, -1))
    return entities, relations
