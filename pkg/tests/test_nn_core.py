import importlib
import math

import numpy as np
import pytest


def _core():
    return importlib.import_module("nn_core")


def test_affine_matches_formula_and_rejects_bad_shapes(rng):
    nn = _core()
    errors = importlib.import_module("errors")
    W, x, b = rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=3)
    assert np.allclose(nn.affine(W, x, b), W @ x + b, atol=1e-12)
    batch = rng.normal(size=(5, 4))
    assert np.allclose(nn.affine(W, batch, b), batch @ W.T + b, atol=1e-12)
    with pytest.raises(errors.ShapeError, match=r"\(3, 4\)"):
        nn.affine(W, rng.normal(size=3), b)
    assert issubclass(errors.ShapeError, ValueError)


def test_affine_backward_shapes(rng):
    nn = _core()
    W, x, d = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 3))
    dW, dx, db = nn.affine_backward(W, x, d)
    assert dW.shape == W.shape and dx.shape == x.shape and db.shape == (3,)
    assert np.allclose(dW, d.T @ x)


def test_softmax_sigmoid_and_log_softmax(rng):
    nn = _core()
    v = rng.normal(size=7)
    p = nn.softmax(v)
    assert abs(p.sum() - 1.0) < 1e-12 and np.all(p > 0)
    assert np.allclose(nn.softmax(v + 100.0), p, atol=1e-12)
    assert np.allclose(nn.softmax(np.zeros(4)), np.full(4, 0.25))
    assert np.allclose(np.exp(nn.log_softmax(v)), p, atol=1e-12)

    s = nn.sigmoid(np.array([-800.0, 0.0, 800.0]))
    assert s[0] == pytest.approx(0.0, abs=1e-300) and s[1] == 0.5 and s[2] == 1.0
    assert np.all(np.isfinite(s))


def test_segment_softmax_normalizes_each_segment(rng):
    nn = _core()
    segments = np.array([0, 0, 0, 2, 2, 3])
    scores = rng.normal(size=6)
    w = nn.segment_softmax(scores, segments, 4)
    sums = nn.segment_sum(w, segments, 4)
    assert np.allclose(sums, [1.0, 0.0, 1.0, 1.0], atol=1e-12)
    assert np.allclose(w[:3], nn.softmax(scores[:3]), atol=1e-12)
    assert w[5] == 1.0
    assert nn.segment_softmax(np.zeros(0), np.zeros(0, dtype=int), 2).size == 0


def test_segment_softmax_backward_matches_finite_differences(rng):
    nn = _core()
    segments = np.array([0, 0, 1, 1, 1])
    scores = rng.normal(size=5)
    c = rng.normal(size=5)

    def f(s):
        return float(np.dot(nn.segment_softmax(s, segments, 2), c))

    analytic = nn.segment_softmax_backward(nn.segment_softmax(scores, segments, 2), c, segments, 2)
    h = 1e-6
    for k in range(5):
        e = np.zeros(5)
        e[k] = h
        numeric = (f(scores + e) - f(scores - e)) / (2 * h)
        assert analytic[k] == pytest.approx(numeric, rel=1e-6, abs=1e-9)


def test_glorot_uniform_is_bounded_and_seeded():
    nn = _core()
    a = nn.glorot_uniform(np.random.default_rng(1), (8, 4))
    b = nn.glorot_uniform(np.random.default_rng(1), (8, 4))
    assert np.array_equal(a, b)
    assert np.all(np.abs(a) <= math.sqrt(6.0 / 12.0))


def test_adam_first_step_moves_by_learning_rate():
    nn = _core()
    p = nn.Parameter("w", np.array([1.0, -2.0]), decay=False)
    p.grad[...] = [0.5, -3.0]
    nn.adam_step(p, nn.AdamConfig(learning_rate=0.1), 1)
    # bias-corrected first step: m_hat / sqrt(v_hat) = sign(g)
    assert np.allclose(p.value, [0.9, -1.9], atol=1e-6)


def test_adam_weight_decay_applies_to_weights_only():
    nn = _core()
    cfg = nn.AdamConfig(learning_rate=0.1, weight_decay=0.5)
    weight = nn.Parameter("W", np.array([2.0]), decay=True)
    bias = nn.Parameter("b", np.array([2.0]), decay=False)
    nn.adam_step(weight, cfg, 1)
    nn.adam_step(bias, cfg, 1)
    assert weight.value[0] < 2.0, "decay gradient should pull the weight down"
    assert bias.value[0] == 2.0, "zero gradient and no decay leave the bias untouched"


def test_adam_rejects_non_finite_gradients_and_bad_config():
    nn = _core()
    errors = importlib.import_module("errors")
    p = nn.Parameter("W_u", np.zeros(2))
    p.grad[0] = np.nan
    with pytest.raises(errors.NonFiniteGradientError, match="W_u") as info:
        nn.adam_step(p, nn.AdamConfig(), 1)
    assert info.value.exit_code == 3
    with pytest.raises(ValueError):
        nn.AdamConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        nn.AdamConfig(beta1=1.0)
    with pytest.raises(ValueError):
        nn.adam_step(nn.Parameter("x", np.zeros(1)), nn.AdamConfig(), 0)


def test_target_cross_entropy_reference_values(rng):
    nn = _core()
    m = 6
    targets = np.zeros((2, m))
    targets[0, 2] = 1
    targets[1, [0, 4]] = 1
    loss, _ = nn.target_cross_entropy(np.zeros((2, m)), targets)
    assert loss == pytest.approx(2 * math.log(m), abs=1e-12)

    perfect = np.full((1, m), -50.0)
    perfect[0, 3] = 50.0
    one_hot = np.zeros((1, m))
    one_hot[0, 3] = 1
    loss, _ = nn.target_cross_entropy(perfect, one_hot)
    assert 0.0 <= loss < 1e-10

    logits = rng.normal(size=(2, m))
    loss, _ = nn.target_cross_entropy(logits, targets)
    expected = 0.0
    for r in range(2):
        pi = np.exp(logits[r]) / np.exp(logits[r]).sum()
        size = targets[r].sum()
        expected -= sum(targets[r, v] * math.log(pi[v]) for v in range(m)) / size
    assert loss == pytest.approx(expected, abs=1e-10)


def test_grad_check_accepts_correct_and_flags_corrupted_gradients(rng):
    nn = _core()
    logits = nn.Parameter("logits", rng.normal(size=(2, 5)))
    targets = np.zeros((2, 5))
    targets[0, 1] = targets[1, [2, 3]] = 1

    def loss_fn(compute_grads):
        loss, d = nn.target_cross_entropy(logits.value, targets)
        if compute_grads:
            logits.grad[...] = d
        return loss

    report = nn.grad_check(loss_fn, [logits])
    assert report.passed, f"worst relative error {report.worst}"

    def corrupt(params):
        params[0].grad.flat[0] += 1.0

    bad = nn.grad_check(loss_fn, [logits], corrupt=corrupt)
    assert not bad.passed
    assert bad.worst[0] == "logits"


def test_grad_check_flags_tiny_wrong_gradients():
    nn = _core()
    theta = nn.Parameter("theta", np.array([5e-10]))

    def loss_fn(compute_grads):
        if compute_grads:
            theta.grad[...] = theta.value
        return 0.5 * float(theta.value[0] ** 2)

    assert nn.grad_check(loss_fn, [theta]).passed

    def drop(params):
        params[0].grad[...] = 0.0

    report = nn.grad_check(loss_fn, [theta], corrupt=drop)
    assert not report.passed
    assert report.max_relative_error["theta"] == pytest.approx(0.05, rel=1e-3)
    assert nn.grad_check(loss_fn, [theta], corrupt=drop, scale_floor=1e-5).passed
