"""Independent reference computations shared by the test modules."""
import math
from fractions import Fraction

import numpy as np


def numeric_grad(f, x, h=1e-6):
    """Central finite differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b)))


def softmax_oracle(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    return [v / sum(e) for v in e]


def info_nce_oracle(pos, negs):
    """-log(exp(pos) / (exp(pos) + sum exp(neg))) with plain floats."""
    return -math.log(math.exp(pos) / (math.exp(pos) + sum(math.exp(n) for n in negs)))


def auc_oracle(scores, labels):
    """All positive x negative comparisons; ties count one half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def confusion_oracle(scores, labels, threshold=0.5):
    tp = fp = fn = tn = 0
    for s, y in zip(scores, labels):
        p = s >= threshold
        if p and y:
            tp += 1
        elif p:
            fp += 1
        elif y:
            fn += 1
        else:
            tn += 1
    # exact rationals, rounded once
    acc = Fraction(tp + tn, len(labels))
    prec = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
    rec = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else Fraction(0)
    return float(acc), float(f1)


def ranking_oracle(scored_items, relevant, k):
    """Sort by (-score, item), then recall and DCG/IDCG by direct summation."""
    ranked = [i for _, i in sorted((-s, i) for i, s in scored_items)][:k]
    hits = [1 if i in relevant else 0 for i in ranked]
    recall = sum(hits) / len(relevant)
    dcg = sum(h / math.log2(pos + 2) for pos, h in enumerate(hits))
    idcg = sum(1 / math.log2(pos + 2) for pos in range(min(k, len(relevant))))
    return recall, dcg / idcg


def micro_instance(**overrides):
    """3 users, 3 items, 6 triples; d=4, l_p=l_h=1, M=N=2. Returns (graph, pairs, config)."""
    from mgacl.graphstore import InteractionGraph, KnowledgeGraph, build_fused_graph
    from mgacl.trainer import TrainConfig

    inter = InteractionGraph(3, 3, [(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 0)])
    triples = [(0, 0, 3), (1, 1, 4), (2, 0, 5), (3, 1, 4), (4, 0, 5), (5, 1, 3)]
    graph = build_fused_graph(inter, KnowledgeGraph(6, 2, triples), {0: 0, 1: 1, 2: 2})
    pairs = np.array([[0, 0, 1], [0, 2, 0], [1, 1, 1], [1, 0, 0], [2, 2, 1], [2, 1, 0]])
    settings = dict(dim=4, l_p=1, l_h=1, M=2, N=2, tau=0.5, lambda1=0.3, lambda2=0.01,
                    drop_prob=0.2, batch_size=6, lr=0.01, seed=0)
    settings.update(overrides)
    return graph, pairs, TrainConfig(**settings)


def total_loss_grad_check(graph, pairs, cfg, h=1e-6):
    """Max relative error between tape and finite-difference gradients of L_total, per parameter."""
    from mgacl import diffcore as dc
    from mgacl.trainer import batch_losses, sample_batch

    store = dc.ParameterStore.init(graph.num_users, graph.num_entities, graph.num_relations,
                                   cfg.dim, np.random.default_rng(cfg.seed))
    store.gcn_b = np.array(0.1)
    batch = sample_batch(graph, pairs[:, 0], pairs[:, 1], pairs[:, 2], cfg, np.random.default_rng(1))
    values = dict(store.items())

    def loss(params):
        return batch_losses(params, graph, batch, cfg, np.random.default_rng(2))["total"]

    tape = dc.Tape()
    grads = dc.backward(tape, loss({k: tape.param(v, k) for k, v in values.items()}))
    errors = {}
    for name, value in values.items():
        def f(x, name=name):
            return float(loss({**values, name: x}).data)
        errors[name] = float(rel_err(grads[name], numeric_grad(f, value, h)))
    return errors
