"""Intra-, inter- and interaction-level InfoNCE losses with in-batch negatives.

Every loss keeps the positive term inside its denominator, so each is
``>= 0`` and equals zero when an anchor has no negatives.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ConfigError
from .itemrep import ItemViews
from .userrep import UserViews

__all__ = [
    "BatchViews",
    "CLLosses",
    "info_nce",
    "info_nce_rows",
    "perturb",
    "intra_level",
    "inter_level",
    "interaction_level",
]


def _check_tau(tau):
    if not tau > 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")


@dataclass
class BatchViews:
    """Representations of one batch of (user, item) rows.

    ``neg_mask[i, j]`` is True when the user of row ``i`` has not interacted
    with the item of row ``j``.
    """

    user: UserViews
    item: ItemViews
    e_u: dc.Tensor
    e_v: dc.Tensor
    labels: np.ndarray
    neg_mask: np.ndarray
    tau: float

    def __post_init__(self):
        _check_tau(self.tau)


@dataclass
class CLLosses:
    intra: dc.Tensor
    inter: dc.Tensor
    interaction: dc.Tensor

    def total(self) -> dc.Tensor:
        return dc.add(dc.add(self.interaction, self.intra), self.inter)


def info_nce_rows(pos_logits, neg_logits=None, neg_mask=None) -> dc.Tensor:
    """Per-row ``-log(exp(p) / (exp(p) + sum_masked exp(n)))`` for pre-scaled logits.

    ``pos_logits`` is ``(B,)`` and ``neg_logits`` ``(B, K)``.
    """
    pos_logits = dc._lift(pos_logits)
    B = pos_logits.shape[0]
    col = dc.reshape(pos_logits, (B, 1))
    if neg_logits is None or dc._lift(neg_logits).shape[-1] == 0:
        return dc.sub(dc.logsumexp(col), pos_logits)
    neg_logits = dc._lift(neg_logits)
    if neg_mask is None:
        neg_mask = np.ones(neg_logits.shape, dtype=bool)
    mask = np.concatenate([np.ones((B, 1), dtype=bool), np.asarray(neg_mask, dtype=bool)], axis=1)
    return dc.sub(dc.logsumexp(dc.concat([col, neg_logits], axis=1), mask), pos_logits)


def info_nce(anchor, positive, negatives=(), tau: float = 1.0) -> dc.Tensor:
    """Scalar InfoNCE; each negative is a ``(e_u, e_v)`` pair scored by their dot product."""
    _check_tau(tau)
    anchor, positive = dc._lift(anchor), dc._lift(positive)
    pos = dc.reshape(dc.scale(dc.dot(anchor, positive), 1.0 / tau), (1,))
    if len(negatives):
        eu = dc.concat([dc.reshape(dc._lift(a), (1, -1)) for a, _ in negatives], axis=0)
        ev = dc.concat([dc.reshape(dc._lift(b), (1, -1)) for _, b in negatives], axis=0)
        neg = dc.reshape(dc.scale(dc.dot(eu, ev), 1.0 / tau), (1, -1))
    else:
        neg = None
    return dc.reshape(info_nce_rows(pos, neg), ())


def _side_loss(a, b, neg_sim, mask, tau):
    pos = dc.scale(dc.dot(a, b), 1.0 / tau)
    return dc.sum_(info_nce_rows(pos, dc.scale(neg_sim, 1.0 / tau), mask))


def intra_level(batch: BatchViews, user_side: bool = True, item_side: bool = True) -> dc.Tensor:
    """Average of the user-view and item-view losses; a skipped side counts as 0.

    User rows pair ``(O_u^r, O_u^e)`` against ``e_u . e_v'`` for non-interacted
    batch items; item rows pair ``(O_v^s, O_v^c)`` against ``e_u' . e_v`` for
    batch users that did not interact with the item.
    """
    zero = dc.Tensor(np.zeros(()))
    l_u = l_v = zero
    if user_side:
        sim = dc.pairwise_dot(batch.e_u, batch.e_v)
        l_u = _side_loss(batch.user.o_r, batch.user.o_e, sim, batch.neg_mask, batch.tau)
    if item_side:
        sim_t = dc.pairwise_dot(batch.e_v, batch.e_u)
        l_v = _side_loss(batch.item.o_s, batch.item.o_c, sim_t, batch.neg_mask.T, batch.tau)
    return dc.scale(dc.add(l_u, l_v), 0.5)


def perturb(o, drop_prob: float, rng) -> dc.Tensor:
    """Inverted dropout: zero each coordinate with ``drop_prob``, rescale survivors."""
    if not 0 <= drop_prob < 1:
        raise ConfigError(f"drop_prob must be in [0, 1), got {drop_prob}")
    o = dc._lift(o)
    if drop_prob == 0:
        return o
    keep = rng.random(o.shape) >= drop_prob
    return dc.elementwise_mul(o, keep / (1.0 - drop_prob))


def inter_level(batch: BatchViews, drop_prob: float, rng) -> dc.Tensor:
    """Clean vs randomly discarded representations, same negatives as the intra level."""
    o_u, o_v = batch.user.o_u, batch.item.o_v
    hat_u = perturb(o_u, drop_prob, rng)
    hat_v = perturb(o_v, drop_prob, rng)
    l_u = _side_loss(o_u, hat_u, dc.pairwise_dot(batch.e_u, batch.e_v), batch.neg_mask, batch.tau)
    l_v = _side_loss(o_v, hat_v, dc.pairwise_dot(batch.e_v, batch.e_u), batch.neg_mask.T, batch.tau)
    return dc.scale(dc.add(l_u, l_v), 0.5)


def interaction_level(batch: BatchViews) -> dc.Tensor:
    """Interacting rows as positives against non-interacted batch items ``O_u . O_v'``."""
    rows = np.flatnonzero(np.asarray(batch.labels) == 1)
    if not len(rows):
        return dc.Tensor(np.zeros(()))
    o_u = dc.gather_rows(batch.user.o_u, rows)
    o_v_pos = dc.gather_rows(batch.item.o_v, rows)
    sim = dc.pairwise_dot(o_u, batch.item.o_v)
    return _side_loss(o_u, o_v_pos, sim, batch.neg_mask[rows], batch.tau)
