"""Raw file parsing and the preprocessing pipeline.

Pipeline order: parse -> binarize -> k-core filter -> dense ids -> per-user
train/eval split -> negative sampling -> align items to the KG.
"""
from __future__ import annotations

import json
import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .errors import AlignmentError, ConfigError, ParseError
from .graphstore import FusedGraph, InteractionGraph, KnowledgeGraph, build_fused_graph

log = logging.getLogger(__name__)


class RawInteraction(NamedTuple):
    user_key: str
    item_key: str
    rating: float


@dataclass
class ParsedKG:
    kg: KnowledgeGraph
    entity_ids: dict
    relation_ids: dict
    alignment: dict  # item_key -> entity_id


@dataclass
class DatasetSplit:
    """Rows of ``(user_id, item_id, label)``; ids are dense from 0."""

    train: np.ndarray
    eval: np.ndarray
    user_ids: dict
    item_ids: dict
    skipped_negative_users: int = 0

    @property
    def num_users(self):
        return len(self.user_ids)

    @property
    def num_items(self):
        return len(self.item_ids)

    def train_positives(self) -> np.ndarray:
        return self.train[self.train[:, 2] == 1, :2]

    def eval_positives(self) -> np.ndarray:
        return self.eval[self.eval[:, 2] == 1, :2]


def _fields(lines: Iterable[str], n: int, what: str, source=None):
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != n or any(not p for p in parts):
            raise ParseError(f"expected {n} tab-separated fields ({what}), got {line!r}", lineno, source)
        yield lineno, parts


def parse_interactions(lines: Iterable[str], source=None) -> list[RawInteraction]:
    out = []
    for lineno, (user, item, rating) in _fields(lines, 3, "user, item, rating", source):
        try:
            value = float(rating)
        except ValueError:
            raise ParseError(f"rating {rating!r} is not a number", lineno, source) from None
        out.append(RawInteraction(user, item, value))
    return out


def parse_triples(lines: Iterable[str], alignment_lines: Iterable[str] = (), source=None,
                  alignment_source=None) -> ParsedKG:
    """Dense ids in first-seen order; duplicate triples are kept."""
    entity_ids, relation_ids = {}, {}
    triples = []
    for _, (h, r, t) in _fields(lines, 3, "head, relation, tail", source):
        hid = entity_ids.setdefault(h, len(entity_ids))
        rid = relation_ids.setdefault(r, len(relation_ids))
        tid = entity_ids.setdefault(t, len(entity_ids))
        triples.append((hid, rid, tid))
    alignment = {}
    for lineno, (item, entity) in _fields(alignment_lines, 2, "item, entity", alignment_source):
        if entity not in entity_ids:
            raise AlignmentError(
                f"{alignment_source or 'alignment'}:{lineno}: item {item!r} aligns to unknown entity {entity!r}"
            )
        alignment[item] = entity_ids[entity]
    kg = KnowledgeGraph(len(entity_ids), len(relation_ids), triples)
    return ParsedKG(kg, entity_ids, relation_ids, alignment)


def binarize(interactions, threshold: float) -> list[tuple[str, str]]:
    return [(x.user_key, x.item_key) for x in interactions if x.rating >= threshold]


def k_core_filter(pairs, k: int) -> list:
    """Largest sub-bipartite-graph where every user and item has degree >= k.

    Duplicate pairs are collapsed; the surviving pairs keep input order.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    pairs = list(dict.fromkeys(tuple(p) for p in pairs))
    by_user, by_item = defaultdict(set), defaultdict(set)
    for u, i in pairs:
        by_user[u].add(i)
        by_item[i].add(u)
    queue = deque([("u", u) for u, s in by_user.items() if len(s) < k]
                  + [("i", i) for i, s in by_item.items() if len(s) < k])
    removed_u, removed_i = set(), set()
    while queue:
        side, node = queue.popleft()
        if side == "u":
            if node in removed_u:
                continue
            removed_u.add(node)
            for i in by_user.pop(node):
                by_item[i].discard(node)
                if len(by_item[i]) < k and i not in removed_i:
                    queue.append(("i", i))
        else:
            if node in removed_i:
                continue
            removed_i.add(node)
            for u in by_item.pop(node):
                by_user[u].discard(node)
                if len(by_user[u]) < k and u not in removed_u:
                    queue.append(("u", u))
    return [(u, i) for u, i in pairs if u not in removed_u and i not in removed_i]


def _dense(keys):
    ids = {}
    for key in keys:
        ids.setdefault(key, len(ids))
    return ids


def split_train_eval(pairs, eval_fraction: float, rng) -> DatasetSplit:
    """Per-user random split of positives; each user keeps at least one in train.

    A user with ``n`` positives gets ``min(round(n * eval_fraction), n - 1)``
    eval positives. All labels are 1.
    """
    if not 0 < eval_fraction < 1:
        raise ConfigError(f"eval_fraction must be in (0, 1), got {eval_fraction}")
    pairs = list(dict.fromkeys(tuple(p) for p in pairs))
    user_ids = _dense(u for u, _ in pairs)
    item_ids = _dense(i for _, i in pairs)
    per_user = defaultdict(list)
    for u, i in pairs:
        per_user[user_ids[u]].append(item_ids[i])
    train, held = [], []
    for u in range(len(user_ids)):
        items = np.array(per_user[u], dtype=np.int64)
        n_eval = min(int(np.floor(len(items) * eval_fraction + 0.5)), len(items) - 1)
        perm = rng.permutation(len(items))
        held += [(u, int(v), 1) for v in items[perm[:n_eval]]]
        train += [(u, int(v), 1) for v in items[perm[n_eval:]]]
    return DatasetSplit(_rows(train), _rows(held), user_ids, item_ids)


def _rows(rows):
    return np.array(rows, dtype=np.int64).reshape(-1, 3)


def _draw_negatives(users, num_items, positive_keys, rng):
    """One uniform non-positive item per entry of ``users`` by rejection."""
    out = rng.integers(num_items, size=len(users))
    todo = np.isin(users * num_items + out, positive_keys)
    while todo.any():
        out[todo] = rng.integers(num_items, size=int(todo.sum()))
        todo[todo] = np.isin(users[todo] * num_items + out[todo], positive_keys)
    return out


def sample_negatives(split: DatasetSplit, ratio: int, rng) -> DatasetSplit:
    """Add ``ratio`` label-0 items per positive, in both train and eval.

    Negatives never collide with any train or eval positive of their user.
    Users who interacted with every item get no negatives (counted and logged).
    """
    if ratio < 1:
        raise ConfigError(f"negative ratio must be >= 1, got {ratio}")
    num_items = split.num_items
    pos = np.concatenate([split.train_positives(), split.eval_positives()])
    keys = np.unique(pos[:, 0] * num_items + pos[:, 1])
    degree = np.bincount(pos[:, 0], minlength=split.num_users)
    saturated = degree >= num_items
    if saturated.any():
        log.warning("%d users interacted with every item; no negatives drawn", int(saturated.sum()))

    def labeled(rows):
        positives = rows[rows[:, 2] == 1]
        users = np.repeat(positives[:, 0], ratio)
        users = users[~saturated[users]]
        items = _draw_negatives(users, num_items, keys, rng)
        neg = np.stack([users, items, np.zeros_like(users)], axis=1)
        return np.concatenate([positives, neg]).astype(np.int64)

    return DatasetSplit(
        labeled(split.train), labeled(split.eval), split.user_ids, split.item_ids,
        skipped_negative_users=int(saturated.sum()),
    )


def align(split: DatasetSplit, parsed: ParsedKG) -> FusedGraph:
    """Fused graph over train positives; items without a KG entity get isolated ones."""
    interactions = InteractionGraph(split.num_users, split.num_items, split.train_positives())
    alignment = {split.item_ids[k]: e for k, e in parsed.alignment.items() if k in split.item_ids}
    return build_fused_graph(interactions, parsed.kg, alignment)


@dataclass
class Prepared:
    split: DatasetSplit
    graph: FusedGraph
    manifest: dict = field(default_factory=dict)


def manifest_for(split: DatasetSplit, graph: FusedGraph, **settings) -> dict:
    pos = np.concatenate([split.train_positives(), split.eval_positives()])
    n_users, n_items = split.num_users, split.num_items
    counts = {
        "users": n_users,
        "items": n_items,
        "interactions": int(len(pos)),
        "avg_user_clicks": round(len(pos) / n_users, 4) if n_users else 0.0,
        "avg_clicked_items": round(len(pos) / n_items, 4) if n_items else 0.0,
        "entities": graph.num_entities,
        "relations": graph.num_relations,
        "triples": len(graph.kg),
        "train_rows": int(len(split.train)),
        "eval_rows": int(len(split.eval)),
        "train_positives": int((split.train[:, 2] == 1).sum()),
        "eval_positives": int((split.eval[:, 2] == 1).sum()),
        "users_without_negatives": split.skipped_negative_users,
    }
    return {**settings, "counts": counts}


def prepare(interaction_lines, kg_lines, alignment_lines, threshold: float = 4.0, k: int = 20,
            eval_fraction: float = 0.2, neg_ratio: int = 1, seed: int = 0, sources=(None, None, None)) -> Prepared:
    """Run the whole preprocessing pipeline on already-opened line iterables."""
    raw = parse_interactions(interaction_lines, source=sources[0])
    parsed = parse_triples(kg_lines, alignment_lines, source=sources[1], alignment_source=sources[2])
    pairs = k_core_filter(binarize(raw, threshold), k)
    split_ss, neg_ss = np.random.SeedSequence(seed).spawn(2)
    split = split_train_eval(pairs, eval_fraction, np.random.default_rng(split_ss))
    split = sample_negatives(split, neg_ratio, np.random.default_rng(neg_ss))
    graph = align(split, parsed)
    manifest = manifest_for(split, graph, seed=seed, threshold=threshold, k=k,
                            eval_fraction=eval_fraction, neg_ratio=neg_ratio)
    return Prepared(split, graph, manifest)


def prepare_files(interactions_path, kg_path, alignment_path, **kwargs) -> Prepared:
    paths = [Path(p) for p in (interactions_path, kg_path, alignment_path)]
    for p in paths:
        if not p.is_file():
            raise FileNotFoundError(f"input file not found: {p}")
    with open(paths[0], encoding="utf-8") as a, open(paths[1], encoding="utf-8") as b, \
            open(paths[2], encoding="utf-8") as c:
        return prepare(a, b, c, sources=tuple(str(p) for p in paths), **kwargs)


CACHE_VERSION = 1


def save_prepared(directory, prepared: Prepared):
    """Write ``manifest.json`` and ``graph_cache.npz`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    g, s = prepared.graph, prepared.split
    with open(directory / "graph_cache.npz", "wb") as fh:
        np.savez(
            fh,
            version=np.array(CACHE_VERSION),
            train=s.train,
            eval=s.eval,
            interactions=g.interactions.edges,
            triples=g.kg.triples,
            item_to_entity=g.item_to_entity,
            shape=np.array([g.num_users, g.num_items, g.num_entities, g.num_relations]),
            user_keys=np.array(json.dumps(list(s.user_ids))),
            item_keys=np.array(json.dumps(list(s.item_ids))),
            skipped=np.array(s.skipped_negative_users),
        )
    (directory / "manifest.json").write_text(json.dumps(prepared.manifest, indent=2, sort_keys=True) + "\n")


def load_prepared(directory) -> Prepared:
    directory = Path(directory)
    cache = directory / "graph_cache.npz"
    if not cache.is_file():
        raise FileNotFoundError(f"no prepared cache at {cache}; run prepare first")
    with np.load(cache, allow_pickle=False) as d:
        if int(d["version"]) != CACHE_VERSION:
            raise ConfigError(f"unsupported cache version {int(d['version'])}")
        n_users, n_items, n_ent, n_rel = (int(x) for x in d["shape"])
        user_ids = {k: i for i, k in enumerate(json.loads(str(d["user_keys"])))}
        item_ids = {k: i for i, k in enumerate(json.loads(str(d["item_keys"])))}
        split = DatasetSplit(d["train"].copy(), d["eval"].copy(), user_ids, item_ids, int(d["skipped"]))
        graph = FusedGraph(
            InteractionGraph(n_users, n_items, d["interactions"]),
            KnowledgeGraph(n_ent, n_rel, d["triples"]),
            d["item_to_entity"].copy(),
        )
    manifest = json.loads((directory / "manifest.json").read_text())
    return Prepared(split, graph, manifest)
