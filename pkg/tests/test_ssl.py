import numpy as np
import pytest

from selfmask.masking import MaskedModel
from selfmask.nn import TrainConfig, init_model
from selfmask.rng import seed_rng
from selfmask.ssl import (AugmentConfig, PrototypeBank, l2_normalize_rows, make_views,
                          sinkhorn_assign, swav_loss, train_smn)


def reference_sinkhorn(scores, eps, iters):
    """Independent plain-loop reference: alternate row/column scaling."""
    k, b = scores.shape
    q = np.exp((scores - scores.max()) / eps)
    q = q / q.sum()
    for _ in range(iters):
        for i in range(k):  # rows to 1/K
            q[i] = q[i] / q[i].sum() / k
        for j in range(b):  # columns to 1/B
            q[:, j] = q[:, j] / q[:, j].sum() / b
    return q


def test_sinkhorn_constant_scores_uniform():
    q = sinkhorn_assign(np.zeros((4, 4)), eps=0.5, iters=3)
    assert np.allclose(q, 1 / 16, atol=1e-12)


def test_sinkhorn_marginals_2x2():
    q = sinkhorn_assign(np.array([[1.0, 0.0], [0.0, 1.0]]), eps=0.5, iters=100)
    assert np.abs(q.sum(axis=1) - 0.5).max() < 1e-6
    assert np.abs(q.sum(axis=0) - 0.5).max() < 1e-6


def test_sinkhorn_nonnegative_total_one():
    scores = seed_rng(1).standard_normal((8, 16))
    q = sinkhorn_assign(scores, eps=0.1, iters=3)
    assert (q >= 0).all()
    assert q.sum() == pytest.approx(1.0)


def test_sinkhorn_matches_reference():
    scores = seed_rng(2).standard_normal((6, 10))
    mine = sinkhorn_assign(scores, eps=0.2, iters=50)
    ref = reference_sinkhorn(scores, eps=0.2, iters=50)
    assert np.allclose(mine, ref, atol=1e-12)


def test_sinkhorn_marginal_convergence_random():
    # random inputs from the operation's domain: prototype scores are
    # dot products of unit vectors, so entries lie in [-1, 1]
    rng = seed_rng(3)
    for _ in range(5):
        z = l2_normalize_rows(rng.standard_normal((64, 12)))
        c = l2_normalize_rows(rng.standard_normal((16, 12)))
        scores = c @ z.T
        q = sinkhorn_assign(scores, eps=0.05, iters=100)
        assert np.abs(q.sum(axis=1) - 1 / 16).max() <= 1e-6
        assert np.abs(q.sum(axis=0) - 1 / 64).max() <= 1e-6


def test_sinkhorn_overflow_guarded():
    scores = np.array([[4000.0, 0.0], [0.0, 4000.0]])
    q = sinkhorn_assign(scores, eps=0.05, iters=10)
    assert np.isfinite(q).all()


def test_sinkhorn_validation():
    with pytest.raises(ValueError):
        sinkhorn_assign(np.zeros((2, 2)), eps=0.0, iters=3)
    with pytest.raises(ValueError):
        sinkhorn_assign(np.zeros((2, 2)), eps=0.1, iters=0)


def test_make_views_identity_when_disabled():
    x = seed_rng(4).standard_normal((5, 8))
    cfg = AugmentConfig(noise_sigma=0.0, dropout_prob=0.0, scale_jitter=0.0)
    a, b = make_views(x, cfg, seed_rng(0))
    assert np.array_equal(a, x) and np.array_equal(b, x)


def test_make_views_noise_moves_points():
    x = np.zeros((100, 4))
    cfg = AugmentConfig(noise_sigma=0.1)
    a, _ = make_views(x, cfg, seed_rng(1))
    assert np.linalg.norm(a - x, axis=1).min() > 0


def test_make_views_deterministic():
    x = seed_rng(5).standard_normal((6, 4))
    cfg = AugmentConfig(noise_sigma=0.2, dropout_prob=0.1, scale_jitter=0.1)
    a1, b1 = make_views(x, cfg, seed_rng(42))
    a2, b2 = make_views(x, cfg, seed_rng(42))
    assert np.array_equal(a1, a2) and np.array_equal(b1, b2)
    assert not np.array_equal(a1, b1)


def test_make_views_image_augmentations():
    x = seed_rng(6).random((4, 64))
    cfg = AugmentConfig(noise_sigma=0.0, image_shape=(8, 8), crop=True, flip=True)
    a, b = make_views(x, cfg, seed_rng(7))
    assert a.shape == x.shape == b.shape


def unit_rows(rng, n, d):
    return l2_normalize_rows(rng.standard_normal((n, d)))


def test_swav_loss_uniform_predictions_give_log_k():
    # embeddings orthogonal to every prototype -> uniform softmax
    d, k, b = 6, 4, 5
    bank = PrototypeBank(d, k, seed_rng(8))
    bank.c[:] = 0.0
    bank.c[0, :] = 1.0  # all prototypes along axis 0
    z = np.zeros((b, d))
    z[:, 1] = 1.0  # embeddings along axis 1, orthogonal to prototypes
    loss, _, _, _ = swav_loss(z, z, bank, tau=0.1, eps=0.05)
    assert loss == pytest.approx(np.log(k), rel=1e-9)


def test_swav_loss_single_prototype_zero():
    d = 4
    bank = PrototypeBank(d, 1, seed_rng(9))
    z = unit_rows(seed_rng(10), 6, d)
    loss, _, _, _ = swav_loss(z, z, bank, tau=0.1, eps=0.05)
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_swav_loss_embedding_grads_match_finite_differences():
    rng = seed_rng(11)
    d, k, b = 5, 7, 4
    tau, eps = 0.3, 0.1
    bank = PrototypeBank(d, k, rng)
    z_t = unit_rows(rng, b, d)
    z_s = unit_rows(rng, b, d)
    loss, dc, dz_t, dz_s = swav_loss(z_t, z_s, bank, tau=tau, eps=eps)

    # independent oracle with targets frozen: fix the Sinkhorn codes once,
    # then the loss is a plain cross-entropy whose z_t dependence is only
    # through the softmax predictions
    def frozen_targets(z):
        q = sinkhorn_assign(bank.c.T @ z.T, eps, 3)
        return (q / q.sum(axis=0, keepdims=True)).T

    q_s = frozen_targets(z_s)
    q_t = frozen_targets(z_t)

    def manual_loss(zt_val):
        def ce(z, q):
            logits = (z @ bank.c) / tau
            logits = logits - logits.max(axis=1, keepdims=True)
            logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
            return -(q * logp).sum(axis=1).mean()

        return 0.5 * (ce(zt_val, q_s) + ce(z_s, q_t))

    assert manual_loss(z_t) == pytest.approx(loss, rel=1e-12)
    h = 1e-6
    for _ in range(12):
        i, j = int(rng.integers(b)), int(rng.integers(d))
        up = z_t.copy()
        up[i, j] += h
        down = z_t.copy()
        down[i, j] -= h
        num = (manual_loss(up) - manual_loss(down)) / (2 * h)
        denom = max(abs(num), 1e-8)
        assert abs(dz_t[i, j] - num) / denom < 1e-5


def test_swav_loss_permutation_equivariant():
    rng = seed_rng(12)
    d, k, b = 5, 6, 8
    bank = PrototypeBank(d, k, rng)
    z_t = unit_rows(rng, b, d)
    z_s = unit_rows(rng, b, d)
    loss, _, _, _ = swav_loss(z_t, z_s, bank, tau=0.2, eps=0.05)
    perm = seed_rng(13).permutation(b)
    loss_p, _, _, _ = swav_loss(z_t[perm], z_s[perm], bank, tau=0.2, eps=0.05)
    assert loss == pytest.approx(loss_p, rel=1e-9)


def clusterable_data(seed=0, n_per=40, classes=4, dim=12):
    rng = seed_rng(seed)
    means = rng.standard_normal((classes, dim)) * 6
    x = np.vstack([means[c] + rng.standard_normal((n_per, dim)) for c in range(classes)])
    return x


def make_masked(seed=0, dims=(12, 16, 8)):
    base = init_model(dims, seed_rng(seed), np.float64)
    return MaskedModel(base)


def test_train_smn_zero_epochs_keeps_init():
    mmodel = make_masked()
    cfg = TrainConfig(lr=5.0, epochs=0, batch_size=16, prototype_count=8, precision="f64")
    result = train_smn(mmodel, clusterable_data(), cfg)
    for m in result.masks:
        assert m.all()


def test_train_smn_deterministic_masks():
    def run():
        mmodel = make_masked()
        cfg = TrainConfig(lr=20.0, epochs=4, batch_size=32, prototype_count=8,
                          precision="f64", head_lr=0.05, prototype_lr=0.05)
        result = train_smn(mmodel, clusterable_data(), cfg)
        from selfmask.maskio import pack_masks

        return pack_masks(result.masks)

    assert run() == run()


def test_train_smn_loss_improves_on_clusterable_data():
    mmodel = make_masked()
    cfg = TrainConfig(lr=20.0, epochs=30, batch_size=32, prototype_count=8,
                      precision="f64", head_lr=0.05, prototype_lr=0.05)
    result = train_smn(mmodel, clusterable_data(), cfg)
    assert result.log[-1]["loss"] < result.log[0]["loss"]
    assert not result.diverged


def test_train_smn_prototypes_stay_unit_norm():
    mmodel = make_masked()
    cfg = TrainConfig(lr=10.0, epochs=3, batch_size=32, prototype_count=8,
                      precision="f64", head_lr=0.05, prototype_lr=0.05)
    result = train_smn(mmodel, clusterable_data(), cfg)
    norms = np.linalg.norm(result.bank.c, axis=0)
    assert np.abs(norms - 1.0).max() < 1e-8


def test_train_smn_emits_jsonl_fields():
    mmodel = make_masked()
    cfg = TrainConfig(lr=10.0, epochs=2, batch_size=32, prototype_count=8,
                      precision="f64")
    result = train_smn(mmodel, clusterable_data(), cfg)
    for row in result.log:
        assert {"epoch", "loss", "lr", "active_fraction"} <= set(row)


def test_train_smn_queue_mode_runs():
    mmodel = make_masked()
    cfg = TrainConfig(lr=10.0, epochs=4, batch_size=32, prototype_count=8,
                      precision="f64", queue_size=64, queue_start_epoch=2)
    result = train_smn(mmodel, clusterable_data(), cfg)
    assert len(result.log) == 4
