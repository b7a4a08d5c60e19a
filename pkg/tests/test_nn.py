import numpy as np
import pytest

from selfmask.nn import (Layer, OptimizerState, SmallModel, TrainConfig, backward,
                         cosine_warmup_lr, forward, init_model, load_checkpoint,
                         make_head, save_checkpoint, sgd_step, softmax_cross_entropy,
                         train_classifier)
from selfmask.rng import seed_rng


def small_random_model(dims, seed=0, dtype=np.float64, head_dim=None):
    rng = seed_rng(seed)
    return init_model(dims, rng, dtype, head_dim=head_dim)


def test_forward_identity_weights():
    w = np.eye(3)
    model = SmallModel([Layer(w.copy(), np.zeros(3), "identity")])
    x = np.array([[1.0, -2.0, 3.0], [0.5, 0.0, -1.0]])
    rec = forward(model, x)
    assert np.allclose(rec.output, x)


def test_forward_zero_weights_gives_bias():
    model = SmallModel([Layer(np.zeros((3, 2)), np.array([0.7, -0.3]), "identity")])
    rec = forward(model, np.ones((4, 3)))
    assert np.allclose(rec.output, np.tile([0.7, -0.3], (4, 1)))


def test_forward_matches_manual_matrix_products():
    model = small_random_model((3, 5, 2), seed=3)
    x = seed_rng(9).standard_normal((2, 3))
    rec = forward(model, x)
    # independent oracle: explicit loops
    l0, l1 = model.layers
    h = np.zeros((2, 5))
    for i in range(2):
        for j in range(5):
            h[i, j] = sum(x[i, k] * l0.weights[k, j] for k in range(3)) + l0.bias[j]
    h = np.maximum(h, 0)
    out = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            out[i, j] = sum(h[i, k] * l1.weights[k, j] for k in range(5)) + l1.bias[j]
    assert np.allclose(rec.output, out, atol=1e-12)


def test_forward_dimension_mismatch():
    model = small_random_model((3, 2))
    with pytest.raises(ValueError):
        forward(model, np.ones((2, 4)))


def test_backward_zero_loss_grad():
    model = small_random_model((4, 6, 3))
    rec = forward(model, seed_rng(1).standard_normal((5, 4)))
    layer_grads, _ = backward(model, rec, np.zeros((5, 3)))
    for gw, gb in layer_grads:
        assert np.all(gw == 0) and np.all(gb == 0)


def test_backward_scalar_hand_derivative():
    # one weight w, input x, quadratic loss L = (w*x - t)^2
    w, x, t = 1.5, 2.0, 0.5
    model = SmallModel([Layer(np.array([[w]]), np.zeros(1), "identity")])
    rec = forward(model, np.array([[x]]))
    loss_grad = 2 * (rec.output - t)  # dL/dy
    layer_grads, _ = backward(model, rec, loss_grad)
    gw = layer_grads[0][0]
    assert gw[0, 0] == pytest.approx(2 * (w * x - t) * x, rel=1e-12)


def finite_difference_grads(fn, params, h=1e-5):
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat = p.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn()
            flat[i] = orig - h
            down = fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def test_backward_matches_finite_differences():
    model = small_random_model((4, 8, 3), seed=2, head_dim=5)
    x = seed_rng(4).standard_normal((6, 4))
    y = seed_rng(5).integers(0, 5, 6)

    def loss_value():
        rec = forward(model, x)
        return softmax_cross_entropy(rec.output, y)[0]

    rec = forward(model, x)
    _, dlogits = softmax_cross_entropy(rec.output, y)
    layer_grads, head_grad = backward(model, rec, dlogits)
    params = []
    analytic = []
    for layer, (gw, gb) in zip(model.layers, layer_grads):
        params.extend([layer.weights, layer.bias])
        analytic.extend([gw, gb])
    params.extend([model.head.weights, model.head.bias])
    analytic.extend(list(head_grad))
    numeric = finite_difference_grads(loss_value, params)
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.abs(n), 1e-8)
        assert np.max(np.abs(a - n) / denom) < 1e-6


def test_backward_stale_record_rejected():
    model = small_random_model((3, 2))
    other = small_random_model((3, 2), seed=1)
    rec = forward(model, np.ones((1, 3)))
    with pytest.raises(ValueError):
        backward(other, rec, np.ones((1, 2)))


def test_sgd_plain_arithmetic():
    p = np.array([1.0])
    state = OptimizerState([p])
    sgd_step([p], [np.array([0.5])], state, lr=0.1, momentum=0.0, weight_decay=0.0)
    assert p[0] == pytest.approx(0.95)


def test_sgd_zero_grad_no_motion_at_step0():
    p = np.array([2.0, -1.0])
    state = OptimizerState([p])
    sgd_step([p], [np.zeros(2)], state, lr=0.5, momentum=0.9, weight_decay=0.0)
    assert np.array_equal(p, [2.0, -1.0])


def test_sgd_two_steps_hand_unrolled():
    lr, m = 0.1, 0.9
    p = np.array([1.0])
    state = OptimizerState([p])
    g1, g2 = np.array([0.3]), np.array([-0.2])
    sgd_step([p], [g1], state, lr, m, 0.0)
    sgd_step([p], [g2], state, lr, m, 0.0)
    # hand unroll: v1 = g1; p1 = 1 - lr*v1; v2 = m*v1 + g2; p2 = p1 - lr*v2
    v1 = 0.3
    p1 = 1.0 - lr * v1
    v2 = m * v1 + (-0.2)
    p2 = p1 - lr * v2
    assert p[0] == pytest.approx(p2, abs=1e-12)


def test_sgd_reduces_to_plain_update():
    p = np.array([3.0])
    q = np.array([3.0])
    g = np.array([0.7])
    sgd_step([p], [g], OptimizerState([p]), 0.2, 0.0, 0.0)
    q -= 0.2 * g
    assert p[0] == q[0]


def test_sgd_nonfinite_gradient_aborts():
    p = np.array([1.0])
    with pytest.raises(FloatingPointError):
        sgd_step([p], [np.array([np.nan])], OptimizerState([p]), 0.1)


def test_cosine_warmup_endpoints():
    assert cosine_warmup_lr(0, 100, 2.0, warmup_fraction=0.2) == 0.0
    assert cosine_warmup_lr(20, 100, 2.0, warmup_fraction=0.2) == pytest.approx(2.0)
    assert cosine_warmup_lr(100, 100, 2.0, warmup_fraction=0.2) == pytest.approx(0.0, abs=1e-12)
    assert cosine_warmup_lr(0, 100, 2.0, warmup_fraction=0.0) == pytest.approx(2.0)


def test_cosine_warmup_continuous_at_boundary():
    base, total, wf = 3.0, 1000, 0.4
    boundary = wf * total
    left = cosine_warmup_lr(int(boundary) - 1, total, base, wf)
    at = cosine_warmup_lr(int(boundary), total, base, wf)
    right = cosine_warmup_lr(int(boundary) + 1, total, base, wf)
    assert abs(at - base) < 1e-12
    assert abs(left - at) < base * 2.0 * np.pi / total  # one-step slope bound
    assert abs(right - at) < base * 2.0 * np.pi / total


def test_cosine_warmup_zero_total_steps():
    with pytest.raises(ValueError):
        cosine_warmup_lr(0, 0, 1.0)


def test_train_classifier_deterministic_trajectory():
    def run():
        model = small_random_model((4, 8, 4), seed=7, dtype=np.float32, head_dim=3)
        x = seed_rng(8).standard_normal((30, 4)).astype(np.float32)
        y = seed_rng(9).integers(0, 3, 30)
        train_classifier(model, x, y, TrainConfig(lr=0.1, epochs=3, batch_size=8),
                         seed_rng(10))
        return [l.weights.copy() for l in model.layers] + [model.head.weights.copy()]

    a, b = run(), run()
    for wa, wb in zip(a, b):
        assert wa.tobytes() == wb.tobytes()


def test_checkpoint_roundtrip(tmp_path):
    for dtype in (np.float32, np.float64):
        model = small_random_model((4, 6, 3), seed=11, dtype=dtype, head_dim=2)
        path = tmp_path / f"m_{np.dtype(dtype).name}.smnw"
        save_checkpoint(path, model)
        loaded = load_checkpoint(path)
        assert loaded.dtype == dtype
        assert len(loaded.layers) == 2
        for la, lb in zip(model.layers, loaded.layers):
            assert np.array_equal(la.weights, lb.weights)
            assert np.array_equal(la.bias, lb.bias)
            assert la.activation == lb.activation
        assert np.array_equal(model.head.weights, loaded.head.weights)


def test_checkpoint_backbone_only(tmp_path):
    model = small_random_model((4, 6, 3), seed=11)
    path = tmp_path / "bb.smnw"
    save_checkpoint(path, model)
    loaded = load_checkpoint(path)
    assert loaded.head is None
    assert len(loaded.layers) == 2


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(warmup_fraction=1.5)
    with pytest.raises(ValueError):
        TrainConfig(precision="f16")
