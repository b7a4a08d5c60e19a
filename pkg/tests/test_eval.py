import numpy as np
import pytest

from selfmask.evaluation import (EmbeddingSet, accuracy_csv, default_k, knn_classify,
                                 linear_probe, lowshot_eval, stratified_subsample)
from selfmask.rng import child_rng, seed_rng


def brute_force_knn(train_emb, train_labels, queries, k, tau):
    """Exhaustive oracle: full similarity sort, explicit weighted votes."""
    def norm(v):
        n = np.linalg.norm(v)
        return v / n if n else v

    preds = []
    classes = np.unique(train_labels)
    for q in queries:
        sims = np.array([norm(q) @ norm(t) for t in train_emb])
        order = np.argsort(-sims, kind="stable")[:k]
        votes = {c: 0.0 for c in classes}
        for idx in order:
            votes[train_labels[idx]] += np.exp(sims[idx] / tau)
        best = max(votes.items(), key=lambda kv: (kv[1], -kv[0]))
        preds.append(best[0])
    return np.array(preds)


def test_knn_single_training_point():
    train = EmbeddingSet(np.array([[1.0, 0.0]]), np.array([7]))
    preds = knn_classify(train, seed_rng(0).standard_normal((5, 2)), k=3)
    assert (preds == 7).all()


def test_knn_exact_match_k1():
    emb = seed_rng(1).standard_normal((20, 4))
    train = EmbeddingSet(emb, np.arange(20))
    preds = knn_classify(train, emb[[3, 11]], k=1)
    assert preds.tolist() == [3, 11]


def test_knn_matches_brute_force_oracle():
    rng = seed_rng(2)
    for trial in range(3):
        emb = rng.standard_normal((200, 8))
        labels = rng.integers(0, 6, 200)
        queries = rng.standard_normal((30, 8))
        train = EmbeddingSet(emb, labels)
        fast = knn_classify(train, queries, k=5, tau=0.1)
        slow = brute_force_knn(emb, labels, queries, k=5, tau=0.1)
        assert np.array_equal(fast, slow)


def test_knn_rescaling_invariance():
    rng = seed_rng(3)
    emb = rng.standard_normal((50, 6))
    labels = rng.integers(0, 3, 50)
    queries = rng.standard_normal((10, 6))
    a = knn_classify(EmbeddingSet(emb, labels), queries, k=7)
    b = knn_classify(EmbeddingSet(emb * 41.5, labels), queries * 3.25, k=7)
    assert np.array_equal(a, b)


def test_knn_k_clamped_and_validation():
    train = EmbeddingSet(seed_rng(4).standard_normal((5, 3)), np.arange(5) % 2)
    preds = knn_classify(train, np.ones((1, 3)), k=100)
    assert preds.shape == (1,)
    with pytest.raises(ValueError):
        knn_classify(EmbeddingSet(np.zeros((0, 3)), np.zeros(0)), np.ones((1, 3)))
    with pytest.raises(ValueError):
        knn_classify(train, np.ones((1, 3)), k=0)
    with pytest.raises(ValueError):
        knn_classify(train, np.ones((1, 3)), tau=0.0)


def test_default_k_keeps_200_when_possible():
    assert default_k(5000) == 200
    assert default_k(100) == 20


def separable_blobs(seed=0, n_per=40, classes=2, dim=6, sep=10.0):
    rng = seed_rng(seed)
    means = rng.standard_normal((classes, dim))
    means = means / np.linalg.norm(means, axis=1, keepdims=True) * sep
    x = np.vstack([means[c] + rng.standard_normal((n_per, dim)) for c in range(classes)])
    y = np.repeat(np.arange(classes), n_per)
    return x, y


def test_linear_probe_separable_perfect_train():
    x, y = separable_blobs()
    _, train_acc, _ = linear_probe(EmbeddingSet(x, y))
    assert train_acc == 1.0


def test_linear_probe_shuffled_labels_chance_level():
    rng = seed_rng(5)
    x = rng.standard_normal((600, 8))
    y = np.tile(np.arange(10), 60)
    train = EmbeddingSet(x[:500], rng.permutation(y[:500]))
    test = EmbeddingSet(x[500:], rng.permutation(y[500:]))
    _, _, test_acc = linear_probe(train, test)
    assert 0.05 <= test_acc <= 0.15


def test_linear_probe_duplication_invariance():
    x, y = separable_blobs(seed=6, n_per=25, classes=3, sep=3.0)
    queries = seed_rng(7).standard_normal((40, 6))
    m1, _, _ = linear_probe(EmbeddingSet(x, y))
    m2, _, _ = linear_probe(EmbeddingSet(np.vstack([x, x]), np.concatenate([y, y])))
    assert np.array_equal(m1.predict(queries), m2.predict(queries))


def test_linear_probe_label_renaming_permutes_predictions():
    x, y = separable_blobs(seed=8, n_per=30, classes=3, sep=4.0)
    queries = seed_rng(9).standard_normal((25, 6))
    m1, _, _ = linear_probe(EmbeddingSet(x, y))
    renamed = np.array([10, 20, 30])[y]  # relabel 0,1,2 -> 10,20,30
    m2, _, _ = linear_probe(EmbeddingSet(x, renamed))
    assert np.array_equal(np.array([10, 20, 30])[m1.predict(queries)],
                          m2.predict(queries))


def test_linear_probe_single_class_rejected():
    with pytest.raises(ValueError):
        linear_probe(EmbeddingSet(np.ones((5, 2)), np.zeros(5)))


def test_stratified_subsample_share_preserved():
    labels = np.repeat([0, 1, 2], [100, 60, 40])
    sub = stratified_subsample(labels, 0.1, seed_rng(10))
    vals, counts = np.unique(labels[sub], return_counts=True)
    assert counts.tolist() == [10, 6, 4]


def test_stratified_subsample_too_small_returns_none():
    labels = np.repeat([0, 1], [100, 3])
    assert stratified_subsample(labels, 0.01, seed_rng(11)) is None


def lowshot_fixture(seed=12):
    x, y = separable_blobs(seed=seed, n_per=150, classes=4, dim=8, sep=6.0)
    noisy = x + 4.0 * seed_rng(seed + 1).standard_normal(x.shape)
    split = 400
    variants = {"clean": EmbeddingSet(x[:split], y[:split]),
                "noisy": EmbeddingSet(noisy[:split], y[:split])}
    tests = {"clean": EmbeddingSet(x[split:], y[split:], "test"),
             "noisy": EmbeddingSet(noisy[split:], y[split:], "test")}
    return variants, tests


def test_lowshot_full_fraction_equals_plain_probe():
    variants, tests = lowshot_fixture()
    rows = lowshot_eval(variants, tests, [1.0], seed=0)
    _, _, direct = linear_probe(variants["clean"], tests["clean"])
    got = [r for r in rows if r["method"] == "clean"][0]
    assert got["accuracy"] == pytest.approx(direct)


def test_lowshot_same_subsets_across_variants_and_reruns():
    variants, tests = lowshot_fixture()
    r1 = lowshot_eval(variants, tests, [0.05, 0.1], seed=3)
    r2 = lowshot_eval(variants, tests, [0.05, 0.1], seed=3)
    assert r1 == r2


def test_lowshot_skips_uncoverable_fraction():
    variants, tests = lowshot_fixture()
    rows = lowshot_eval(variants, tests, [0.001, 0.5], seed=1)
    fractions = {r["fraction"] for r in rows}
    assert fractions == {0.5}


def test_accuracy_csv_schema():
    rows = [{"method": "m", "fraction": 0.1, "seed": 0, "accuracy": 0.5}]
    text = accuracy_csv(rows)
    assert text.splitlines()[0] == "method,fraction,seed,accuracy"
    assert "m,0.1,0,0.5" in text
