"""Label-consuming evaluation: weighted k-NN, linear probe, low-shot curves."""

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np

from .rng import child_rng

log = logging.getLogger(__name__)


@dataclass
class EmbeddingSet:
    embeddings: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,)
    split: str = "train"

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.embeddings.shape[0] != self.labels.shape[0]:
            raise ValueError("embedding row count must equal label count")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("embeddings must be finite")


def _normalize(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return x / norms


def knn_classify(train: EmbeddingSet, queries, k=200, tau=0.1):
    """Cosine-similarity k-NN with temperature-weighted voting.

    The top-k training neighbors of each query vote with weight
    exp(similarity/tau); the highest-voted class wins (ties to the lower
    class id). k is clamped to the training-set size.
    """
    if train.embeddings.shape[0] == 0:
        raise ValueError("empty training set")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    k = min(k, train.embeddings.shape[0])
    t = _normalize(train.embeddings)
    q = _normalize(np.asarray(queries, dtype=np.float64))
    sims = q @ t.T  # (nq, nt)
    classes = np.unique(train.labels)
    class_index = {c: i for i, c in enumerate(classes)}
    y = np.array([class_index[c] for c in train.labels])
    top = np.argpartition(-sims, kth=k - 1, axis=1)[:, :k]
    preds = np.empty(q.shape[0], dtype=classes.dtype)
    for i in range(q.shape[0]):
        idx = top[i]
        w = np.exp(sims[i, idx] / tau)
        votes = np.zeros(classes.size)
        np.add.at(votes, y[idx], w)
        preds[i] = classes[np.argmax(votes)]
    return preds


def knn_accuracy(train: EmbeddingSet, test: EmbeddingSet, k=200, tau=0.1) -> float:
    preds = knn_classify(train, test.embeddings, k, tau)
    return float((preds == test.labels).mean())


def default_k(train_size: int, k=200) -> int:
    """Keep the standard 200 neighbors whenever the training set permits."""
    return min(k, max(1, train_size // 5))


@dataclass
class ProbeModel:
    weights: np.ndarray  # (d, n_classes)
    bias: np.ndarray  # (n_classes,)
    classes: np.ndarray

    def decision(self, x):
        return np.asarray(x, dtype=np.float64) @ self.weights + self.bias

    def predict(self, x):
        return self.classes[np.argmax(self.decision(x), axis=1)]


def _probe_objective(w, b, x, y_onehot):
    logits = x @ w + b
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -(y_onehot * logp).sum(axis=1).mean()
    p = np.exp(logp)
    g = (p - y_onehot) / x.shape[0]
    return loss, x.T @ g, g.sum(axis=0)


def linear_probe(train: EmbeddingSet, test: EmbeddingSet | None = None,
                 grad_tol=1e-5, max_iter=500):
    """Multinomial logistic regression on frozen embeddings.

    Full-batch gradient descent with Armijo backtracking line search on the
    convex unregularized objective, initialized at zero; converged when the
    gradient norm drops below grad_tol. Deterministic, so duplicating every
    training row reproduces the same decision function. Returns
    (ProbeModel, train_accuracy, test_accuracy-or-None).
    """
    classes = np.unique(train.labels)
    if classes.size < 2:
        raise ValueError("linear probe needs at least 2 classes")
    x = train.embeddings
    y = np.searchsorted(classes, train.labels)
    y_onehot = np.zeros((x.shape[0], classes.size))
    y_onehot[np.arange(x.shape[0]), y] = 1.0
    w = np.zeros((x.shape[1], classes.size))
    b = np.zeros(classes.size)
    step = 1.0
    loss, gw, gb = _probe_objective(w, b, x, y_onehot)
    for _ in range(max_iter):
        gnorm = np.sqrt((gw ** 2).sum() + (gb ** 2).sum())
        if gnorm < grad_tol:
            break
        # Armijo backtracking: shrink until sufficient decrease
        step = min(step * 2.0, 1e6)
        while True:
            w2, b2 = w - step * gw, b - step * gb
            loss2, gw2, gb2 = _probe_objective(w2, b2, x, y_onehot)
            if loss2 <= loss - 1e-4 * step * gnorm ** 2 or step < 1e-12:
                break
            step *= 0.5
        w, b, loss, gw, gb = w2, b2, loss2, gw2, gb2
    model = ProbeModel(w, b, classes)
    train_acc = float((model.predict(x) == train.labels).mean())
    test_acc = None
    if test is not None:
        test_acc = float((model.predict(test.embeddings) == test.labels).mean())
    return model, train_acc, test_acc


def stratified_subsample(labels, fraction, rng):
    """Index subset preserving each class's share within half a sample.

    Returns None when some class would receive zero samples, which callers
    treat as "fraction too small", skipping that fraction.
    """
    labels = np.asarray(labels)
    chosen = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        take = int(round(fraction * idx.size))
        if take == 0:
            return None
        chosen.append(rng.permutation(idx)[:take])
    return np.sort(np.concatenate(chosen))


def lowshot_eval(variants: dict, test_sets: dict, label_fractions, seed=0):
    """Probe accuracy of several embedding variants at shrinking label budgets.

    ``variants`` maps a method name to its train EmbeddingSet; ``test_sets``
    maps the same names to test EmbeddingSets. Every variant sees the same
    per-fraction label subset (drawn from the seed and the shared labels),
    isolating embedding quality from subset luck. Returns rows
    (method, fraction, seed, accuracy).
    """
    names = sorted(variants)
    base_labels = variants[names[0]].labels
    for name in names:
        if not np.array_equal(variants[name].labels, base_labels):
            raise ValueError("all variants must align on the same labeled data")
    rows = []
    for fi, fraction in enumerate(label_fractions):
        if not 0 < fraction <= 1:
            raise ValueError(f"label fraction must lie in (0,1], got {fraction}")
        sub = stratified_subsample(base_labels, fraction, child_rng(seed, 17, fi))
        if sub is None:
            log.warning("fraction %.4f cannot cover every class, skipped", fraction)
            continue
        for name in names:
            tr = variants[name]
            probe_train = EmbeddingSet(tr.embeddings[sub], tr.labels[sub], "train")
            _, _, acc = linear_probe(probe_train, test_sets[name])
            rows.append({"method": name, "fraction": fraction, "seed": seed,
                         "accuracy": acc})
    return rows


def accuracy_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["method", "fraction", "seed", "accuracy"])
    writer.writeheader()
    for r in rows:
        writer.writerow(r)
    return buf.getvalue()
