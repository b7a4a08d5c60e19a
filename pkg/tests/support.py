"""Shared builders and independent oracles for the test suite."""

import numpy as np

from selfmask.data import gen_dataset
from selfmask.harness import pretrain_backbone
from selfmask.invariance import PairedProblem
from selfmask.nn import TrainConfig


def brute_force_knn(train_emb, train_labels, queries, k, tau):
    """Exhaustive oracle: full similarity sort, explicit weighted votes."""
    def norm(v):
        n = np.linalg.norm(v)
        return v / n if n else v

    preds = []
    classes = np.unique(train_labels)
    for q in queries:
        sims = np.array([norm(q) @ norm(t) for t in train_emb])
        order = np.argsort(-sims, kind="stable")[: min(k, len(train_emb))]
        votes = {c: 0.0 for c in classes}
        for idx in order:
            votes[train_labels[idx]] += np.exp(sims[idx] / tau)
        best = max(votes.items(), key=lambda kv: (kv[1], -kv[0]))
        preds.append(best[0])
    return np.array(preds)


def adjusted_rand_index(a, b):
    """Contingency-table ARI, written out as the independent oracle."""
    a, b = np.asarray(a), np.asarray(b)
    ua, ub = np.unique(a), np.unique(b)
    table = np.zeros((ua.size, ub.size), dtype=np.int64)
    for i, ca in enumerate(ua):
        for j, cb in enumerate(ub):
            table[i, j] = np.sum((a == ca) & (b == cb))

    def comb2(v):
        return v * (v - 1) // 2

    sum_ij = comb2(table).sum()
    sum_a = comb2(table.sum(axis=1)).sum()
    sum_b = comb2(table.sum(axis=0)).sum()
    n = comb2(a.size)
    expected = sum_a * sum_b / n
    max_index = (sum_a + sum_b) / 2
    return (sum_ij - expected) / (max_index - expected)


def blob_problem(seed=0, classes=10, per_class=64, dim=32,
                 dims=(32, 128, 96, 32)) -> PairedProblem:
    """~20k maskable parameters over 10-class blobs, float64 throughout."""
    ds = gen_dataset("blobs", {"classes": classes, "per_class": per_class,
                               "dim": dim, "separation": 6.0}, seed=seed)
    pre = TrainConfig(lr=0.05, momentum=0.9, epochs=15, batch_size=64,
                      precision="f64", seed=seed)
    backbone = pretrain_backbone(ds, dims, pre)
    backbone.head = None
    return PairedProblem(backbone, ds.x_train.astype(np.float64),
                         ds.y_train, classes, head_seed=seed)
