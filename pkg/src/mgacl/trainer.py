"""Joint training of the recommendation and contrastive objectives."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .contrastive import BatchViews, inter_level, interaction_level, intra_level
from .errors import ColdStartError, ConfigError, NumericError
from .graphstore import FusedGraph, sample_item_tree, sample_user_batch, usable_users
from .itemrep import ItemViews, propagate_tree
from .userrep import UserViews, user_representation

log = logging.getLogger(__name__)

ABLATIONS = ("rv", "ev", "gcn", "cl")
LOSS_KEYS = ("base", "intra", "inter", "interaction", "reg", "total")


@dataclass
class TrainConfig:
    l_p: int = 2
    l_h: int = 2
    M: int = 32
    N: int = 8
    tau: float = 0.2
    lambda1: float = 0.1
    lambda2: float = 1e-5
    dim: int = 64
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 20
    seed: int = 0
    drop_prob: float = 0.1
    neg_ratio: int = 1
    ablate: tuple = ()
    eval_every: int = 1
    eval_seed: int = 12345
    k: int = 20

    def __post_init__(self):
        self.ablate = tuple(sorted(set(self.ablate)))

    def problems(self) -> list[str]:
        """Every validation failure, one message per offending field."""
        out = []
        for name in ("l_p", "M", "N", "dim", "batch_size", "neg_ratio", "eval_every", "k", "l_h"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0:
            out.append(f"epochs must be >= 0, got {self.epochs}")
        if not self.tau > 0:
            out.append(f"tau must be > 0, got {self.tau}")
        if not self.lr > 0:
            out.append(f"lr must be > 0, got {self.lr}")
        for name in ("lambda1", "lambda2"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0 <= self.drop_prob < 1:
            out.append(f"drop_prob must be in [0, 1), got {self.drop_prob}")
        unknown = set(self.ablate) - set(ABLATIONS)
        if unknown:
            out.append(f"ablate has unknown flags {sorted(unknown)}; choose from {list(ABLATIONS)}")
        return out

    def validate(self) -> "TrainConfig":
        problems = self.problems()
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def uses(self, part: str) -> bool:
        return part not in self.ablate

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ablate"] = list(self.ablate)
        return d


@dataclass
class Batch:
    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    pref_rel: np.ndarray  # (B, l_p + 1, M)
    pref_tail: np.ndarray
    tree_entities: list
    tree_relations: list
    neg_mask: np.ndarray  # (B, B)


def sample_batch(graph: FusedGraph, users, items, labels, cfg: TrainConfig, rng) -> Batch:
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    rel, tail = sample_user_batch(graph, users, cfg.l_p + 1, cfg.M, rng)
    roots = graph.item_to_entity[items]
    if cfg.uses("gcn"):
        ents, rels = sample_item_tree(graph, roots, cfg.l_h, cfg.N, rng)
    else:
        ents, rels = [roots[:, None]], [None]
    neg_mask = ~graph.interactions.has_edges(users[:, None], items[None, :])
    return Batch(users, items, np.asarray(labels, dtype=np.float64), rel, tail, ents, rels, neg_mask)


def forward(params: dict, graph: FusedGraph, batch: Batch, cfg: TrainConfig):
    """Encode a batch. ``params`` maps parameter names to arrays or tensors."""
    e_u = dc.gather_rows(params["user"], batch.users)
    ents = [dc.gather_rows(params["entity"], ids) for ids in batch.tree_entities]
    e_v = dc.reshape(ents[0], (len(batch.items), -1))
    rel_embs = dc.gather_rows(params["relation"], batch.pref_rel)
    tail_embs = dc.gather_rows(params["entity"], batch.pref_tail)
    user = user_representation(
        e_u, rel_embs, tail_embs, e_v,
        use_relation_view=cfg.uses("rv"), use_entity_view=cfg.uses("ev"),
    )
    rels = [None] + [dc.gather_rows(params["relation"], ids) for ids in batch.tree_relations[1:]]
    item = propagate_tree(e_u, ents, rels, params["gcn_w"], params["gcn_b"], cfg.N, cfg.uses("gcn"))
    return user, item, e_u, e_v


def predict(user: UserViews, item: ItemViews) -> dc.Tensor:
    """Click probability ``sigmoid(O_u . O_v)``."""
    return dc.sigmoid(dc.dot(user.o_u, item.o_v))


def base_loss(pred, labels) -> dc.Tensor:
    """Summed binary cross-entropy; ``log`` clamps its input at 1e-12."""
    labels = np.asarray(labels, dtype=np.float64)
    pos = dc.elementwise_mul(dc.log(pred), labels)
    neg = dc.elementwise_mul(dc.log(dc.sub(1.0, pred)), 1.0 - labels)
    return dc.scale(dc.sum_(dc.add(pos, neg)), -1.0)


def total_loss(base, cl_sum, reg, lambda1: float, lambda2: float) -> dc.Tensor:
    """``base + lambda1 * (interaction + intra + inter) + lambda2 * reg``."""
    return dc.add(dc.add(base, dc.scale(cl_sum, lambda1)), dc.scale(reg, lambda2))


def regularizer(params: dict, batch: Batch, cfg: TrainConfig) -> dc.Tensor:
    """Squared L2 norm of the parameter rows this batch touches."""
    ent_ids = [batch.pref_tail.reshape(-1)] + [e.reshape(-1) for e in batch.tree_entities]
    rel_ids = [batch.pref_rel.reshape(-1)] + [r.reshape(-1) for r in batch.tree_relations[1:]]
    parts = [
        dc.l2_norm_sq(dc.gather_rows(params["user"], np.unique(batch.users))),
        dc.l2_norm_sq(dc.gather_rows(params["entity"], np.unique(np.concatenate(ent_ids)))),
        dc.l2_norm_sq(dc.gather_rows(params["relation"], np.unique(np.concatenate(rel_ids)))),
    ]
    if cfg.uses("gcn"):
        parts += [dc.l2_norm_sq(params["gcn_w"]), dc.l2_norm_sq(params["gcn_b"])]
    total = parts[0]
    for p in parts[1:]:
        total = dc.add(total, p)
    return total


def batch_losses(params: dict, graph: FusedGraph, batch: Batch, cfg: TrainConfig, drop_rng) -> dict:
    """All loss components for one batch as tensors (zero tensors when disabled)."""
    user, item, e_u, e_v = forward(params, graph, batch, cfg)
    out = {"pred": predict(user, item)}
    out["base"] = base_loss(out["pred"], batch.labels)
    zero = dc.Tensor(np.zeros(()))
    if cfg.uses("cl"):
        views = BatchViews(user, item, e_u, e_v, batch.labels, batch.neg_mask, cfg.tau)
        out["intra"] = intra_level(
            views,
            user_side=cfg.uses("rv") and cfg.uses("ev"),
            item_side=cfg.uses("gcn"),
        )
        out["inter"] = inter_level(views, cfg.drop_prob, drop_rng)
        out["interaction"] = interaction_level(views)
        cl_sum = dc.add(dc.add(out["interaction"], out["intra"]), out["inter"])
        lambda1 = cfg.lambda1
    else:
        out["intra"] = out["inter"] = out["interaction"] = zero
        cl_sum, lambda1 = zero, 0.0
    out["reg"] = regularizer(params, batch, cfg)
    out["cl_term"] = dc.scale(cl_sum, lambda1)
    out["total"] = total_loss(out["base"], cl_sum, out["reg"], lambda1, cfg.lambda2)
    return out


@dataclass
class TrainState:
    config: TrainConfig
    store: dc.ParameterStore
    optimizer: dc.Adam
    shuffle_rng: np.random.Generator
    sample_rng: np.random.Generator
    drop_rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    skipped_pairs: int = 0
    step_log: list = field(default_factory=list)

    @classmethod
    def create(cls, cfg: TrainConfig, graph: FusedGraph) -> "TrainState":
        cfg.validate()
        init_ss, shuffle_ss, sample_ss, drop_ss = np.random.SeedSequence(cfg.seed).spawn(4)
        store = dc.ParameterStore.init(
            graph.num_users, graph.num_entities, graph.num_relations, cfg.dim,
            np.random.default_rng(init_ss),
        )
        return cls(
            config=cfg,
            store=store,
            optimizer=dc.Adam(lr=cfg.lr),
            shuffle_rng=np.random.default_rng(shuffle_ss),
            sample_rng=np.random.default_rng(sample_ss),
            drop_rng=np.random.default_rng(drop_ss),
        )


def train_step(state: TrainState, graph: FusedGraph, pairs: np.ndarray) -> dict:
    """One optimizer step on ``pairs`` (rows of user, item, label); returns float components."""
    cfg = state.config
    batch = sample_batch(graph, pairs[:, 0], pairs[:, 1], pairs[:, 2], cfg, state.sample_rng)
    tape = dc.Tape()
    params = {name: tape.param(value, name) for name, value in state.store.items()}
    losses = batch_losses(params, graph, batch, cfg, state.drop_rng)
    grads = dc.backward(tape, losses["total"])
    state.optimizer.step(state.store, grads)
    state.step += 1
    record = {k: float(losses[k].data) for k in LOSS_KEYS}
    record["cl_term"] = float(losses["cl_term"].data)
    record["n"] = len(pairs)
    return record


def train_epoch(state: TrainState, train_pairs: np.ndarray, graph: FusedGraph) -> dict:
    """Shuffle, batch and step once over ``train_pairs``.

    Pairs whose user cannot be sampled at some hop are skipped and counted.
    Reported losses are per-example means.
    """
    cfg = state.config
    train_pairs = np.asarray(train_pairs, dtype=np.int64)
    ok = usable_users(graph, cfg.l_p + 1)[train_pairs[:, 0]]
    skipped = int((~ok).sum())
    if skipped:
        log.warning("skipping %d pairs of cold-start users", skipped)
        state.skipped_pairs += skipped
    pairs = train_pairs[ok]
    order = state.shuffle_rng.permutation(len(pairs))
    sums = dict.fromkeys(LOSS_KEYS + ("cl_term",), 0.0)
    n = 0
    for start in range(0, len(pairs), cfg.batch_size):
        chunk = pairs[order[start:start + cfg.batch_size]]
        record = train_step(state, graph, chunk)
        state.step_log.append(record)
        for key in sums:
            sums[key] += record[key]
        n += record["n"]
    state.epoch += 1
    report = {"epoch": state.epoch}
    report.update({k: (v / n if n else 0.0) for k, v in sums.items()})
    report["skipped"] = skipped
    return report


class Recommender:
    """A trained parameter snapshot bound to its graph and config, for scoring."""

    def __init__(self, store: dc.ParameterStore, graph: FusedGraph, config: TrainConfig):
        self.store = store
        self.graph = graph
        self.config = config

    def score(self, users, items, seed=None, batch_size: int = 1024) -> np.ndarray:
        """Click probabilities for aligned ``users``/``items``; deterministic per seed.

        Cold-start users fall back to their base embedding as ``O_u``.
        """
        cfg = self.config
        rng = np.random.default_rng(cfg.eval_seed if seed is None else seed)
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        out = np.empty(len(users))
        ok = usable_users(self.graph, cfg.l_p + 1)
        params = dict(self.store.items())
        for start in range(0, len(users), batch_size):
            u = users[start:start + batch_size]
            v = items[start:start + batch_size]
            warm = ok[u]
            out[start:start + len(u)] = self._score_chunk(params, u, v, warm, rng)
        return out

    def _score_chunk(self, params, u, v, warm, rng):
        cfg = self.config
        scores = np.empty(len(u))
        if warm.any():
            batch = sample_batch(self.graph, u[warm], v[warm], np.zeros(warm.sum()), cfg, rng)
            user, item, _, _ = forward(params, self.graph, batch, cfg)
            scores[warm] = predict(user, item).data
        if (~warm).any():
            cold_cfg = dataclasses.replace(cfg, ablate=tuple(set(cfg.ablate) | {"rv", "ev"}))
            roots = self.graph.item_to_entity[v[~warm]]
            if cold_cfg.uses("gcn"):
                ents, rels = sample_item_tree(self.graph, roots, cfg.l_h, cfg.N, rng)
            else:
                ents, rels = [roots[:, None]], [None]
            e_u = dc.gather_rows(params["user"], u[~warm])
            ent_t = [dc.gather_rows(params["entity"], ids) for ids in ents]
            rel_t = [None] + [dc.gather_rows(params["relation"], ids) for ids in rels[1:]]
            item = propagate_tree(e_u, ent_t, rel_t, params["gcn_w"], params["gcn_b"], cfg.N, cold_cfg.uses("gcn"))
            scores[~warm] = dc.sigmoid(dc.dot(e_u, item.o_v)).data
        return scores


class TrainingAborted(NumericError):
    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class FitResult:
    store: dc.ParameterStore
    history: list
    best_epoch: int | None
    best_auc: float | None
    state: TrainState


def fit(config: TrainConfig, train_pairs, graph: FusedGraph, eval_pairs=None, on_epoch=None) -> FitResult:
    """Train for ``config.epochs`` epochs, keeping the best-eval-AUC parameters.

    Without eval pairs the final parameters are returned. ``on_epoch`` is
    called with each epoch report (one training-log line).
    """
    from .evalmetrics import auc, acc_f1

    state = TrainState.create(config, graph)
    history = []
    best = (None, -math.inf, state.store.copy())
    train_pairs = np.asarray(train_pairs, dtype=np.int64)
    for _ in range(config.epochs):
        try:
            report = train_epoch(state, train_pairs, graph)
        except NumericError as exc:
            diag = {
                "epoch": state.epoch,
                "step": state.step,
                "last_steps": state.step_log[-5:],
                "param_abs_max": {k: float(np.max(np.abs(v))) for k, v in state.store.items()},
            }
            raise TrainingAborted(f"non-finite value during training: {exc}", diag) from exc
        if not all(math.isfinite(report[k]) for k in LOSS_KEYS):
            raise TrainingAborted("non-finite loss", {"report": report})
        if eval_pairs is not None and len(eval_pairs) and state.epoch % config.eval_every == 0:
            eval_pairs = np.asarray(eval_pairs, dtype=np.int64)
            model = Recommender(state.store, graph, config)
            scores = model.score(eval_pairs[:, 0], eval_pairs[:, 1])
            labels = eval_pairs[:, 2]
            report["auc"] = auc(scores, labels)
            report["acc"], report["f1"] = acc_f1(scores, labels)
            if report["auc"] > best[1]:
                best = (state.epoch, report["auc"], state.store.copy())
        history.append(report)
        if on_epoch is not None:
            on_epoch(report)
    if best[0] is None:
        return FitResult(state.store, history, None, None, state)
    return FitResult(best[2], history, best[0], best[1], state)
