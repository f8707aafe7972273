import math

import numpy as np
import pytest

from app.core.exceptions import NumericError, ShapeError
from app.schemas.training import LrSchedule
from app.services import numerics


def test_softmax_symmetric_and_stable():
    np.testing.assert_allclose(numerics.softmax(np.array([0.0, 0.0])), [0.5, 0.5])
    np.testing.assert_allclose(numerics.softmax(np.array([1000.0, 0.0])), [1.0, 0.0], atol=1e-12)


def test_softmax_matches_direct_formula():
    x = np.array([1.0, 2.0, 3.0])
    expected = np.exp(x) / np.exp(x).sum()
    np.testing.assert_allclose(numerics.softmax(x), expected, rtol=1e-12)


def test_softmax_rejects_bad_axis_and_nan():
    with pytest.raises(ShapeError):
        numerics.softmax(np.zeros(3), axis=2)
    with pytest.raises(NumericError):
        numerics.softmax(np.array([1.0, np.nan]))


def test_cross_entropy_uniform_and_saturated():
    logits = np.zeros((1, 1, 4))
    assert numerics.cross_entropy(logits, np.array([[2]]), np.array([[True]])) == pytest.approx(math.log(4))
    logits = np.zeros((1, 1, 4))
    logits[0, 0, 1] = 30.0
    assert numerics.cross_entropy(logits, np.array([[1]]), np.array([[True]])) < 1e-9


def test_cross_entropy_hand_computed_two_positions():
    logits = np.array([[[1.0, 2.0, 0.0], [0.5, 0.5, 3.0]]])
    targets = np.array([[0, 2]])
    mask = np.array([[True, True]])

    def nll(row, target):
        return -(row[target] - math.log(sum(math.exp(v) for v in row)))

    expected = (nll(logits[0, 0], 0) + nll(logits[0, 1], 2)) / 2
    assert numerics.cross_entropy(logits, targets, mask) == pytest.approx(expected, rel=1e-12)


def test_cross_entropy_ignores_masked_positions():
    logits = np.random.default_rng(0).normal(size=(1, 2, 5))
    full = numerics.cross_entropy(logits[:, :1], np.array([[3]]), np.array([[True]]))
    masked = numerics.cross_entropy(logits, np.array([[3, 4]]), np.array([[True, False]]))
    assert masked == pytest.approx(full)


def test_cross_entropy_all_masked_is_an_error():
    with pytest.raises(NumericError):
        numerics.cross_entropy(np.zeros((1, 2, 3)), np.zeros((1, 2), dtype=int), np.zeros((1, 2), dtype=bool))


def test_cross_entropy_backward_matches_finite_differences(rng):
    logits = rng.normal(size=(2, 3, 5))
    targets = rng.integers(0, 5, size=(2, 3))
    mask = np.array([[True, True, False], [True, False, False]])
    analytic = numerics.cross_entropy_backward(logits, targets, mask)
    numeric = numerics.finite_difference_gradient(lambda x: numerics.cross_entropy(x, targets, mask), logits)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8)


def test_layer_norm_and_gelu_backward(rng):
    x = rng.normal(size=(2, 3, 6))
    gain = rng.normal(size=6)
    bias = rng.normal(size=6)
    upstream = rng.normal(size=(2, 3, 6))

    def objective(point):
        out, _ = numerics.layer_norm(point, gain, bias)
        return float((out * upstream).sum())

    _, cache = numerics.layer_norm(x, gain, bias)
    grad_x, grad_gain, grad_bias = numerics.layer_norm_backward(upstream, cache)
    np.testing.assert_allclose(grad_x, numerics.finite_difference_gradient(objective, x), rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(grad_bias, upstream.sum(axis=(0, 1)))

    g = numerics.gelu_backward(upstream, x)
    numeric = numerics.finite_difference_gradient(lambda p: float((numerics.gelu(p) * upstream).sum()), x)
    np.testing.assert_allclose(g, numeric, rtol=1e-5, atol=1e-8)


def test_attention_backward_with_prefix(rng):
    d, heads = 4, 2
    weights = numerics.AttentionWeights(
        q=rng.normal(size=(d, d)),
        k=rng.normal(size=(d, d)),
        v=rng.normal(size=(d, d)),
        o=rng.normal(size=(d, d)),
        prefix_k=rng.normal(size=(2, d)),
        prefix_v=rng.normal(size=(2, d)),
    )
    x = rng.normal(size=(1, 3, d))
    mask = np.tril(np.ones((3, 3), dtype=bool))[None]
    upstream = rng.normal(size=(1, 3, d))

    out, cache = numerics.attention(x, x, weights, heads, mask)
    grads = numerics.attention_backward(upstream, cache)

    def objective(_):
        result, _ = numerics.attention(x, x, weights, heads, mask)
        return float((result * upstream).sum())

    for name in ("q", "v", "prefix_k", "prefix_v"):
        point = getattr(weights, name)
        np.testing.assert_allclose(
            grads[name], numerics.finite_difference_gradient(objective, point), rtol=1e-5, atol=1e-8
        )


def test_masked_keys_get_zero_probability():
    d = 2
    eye = np.eye(d)
    weights = numerics.AttentionWeights(q=eye, k=eye, v=eye, o=eye)
    x = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    mask = np.array([[[True, False], [True, False]]])
    _, cache = numerics.attention(x, x, weights, 1, mask)
    probs = cache[5]
    assert np.all(probs[..., 1] == 0.0)


def test_adam_zero_gradient_leaves_parameters():
    params = {"w": np.array([1.0, -2.0])}
    state = numerics.AdamState()
    numerics.adam_step(params, {"w": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])


def test_adam_first_step_moves_by_learning_rate():
    params = {"w": np.array([1.0, 1.0])}
    numerics.adam_step(params, {"w": np.array([0.5, -3.0])}, numerics.AdamState(), lr=0.01)
    np.testing.assert_allclose(params["w"], [0.99, 1.01], rtol=1e-6)


def test_adam_two_steps_match_scalar_reference():
    params = {"w": np.array([0.3])}
    state = numerics.AdamState()
    g = 0.2
    lr = 0.05
    numerics.adam_step(params, {"w": np.array([g])}, state, lr)
    numerics.adam_step(params, {"w": np.array([g])}, state, lr)

    w, m, s = 0.3, 0.0, 0.0
    for t in (1, 2):
        m = 0.9 * m + 0.1 * g
        s = 0.999 * s + 0.001 * g * g
        w -= lr * (m / (1 - 0.9 ** t)) / (math.sqrt(s / (1 - 0.999 ** t)) + 1e-8)
    assert params["w"][0] == pytest.approx(w, rel=1e-12)
    assert state.step == 2


def test_adam_skips_frozen_tensors():
    params = {"a": np.ones(2), "b": np.ones(2)}
    grads = {"a": np.ones(2), "b": np.ones(2)}
    numerics.adam_step(params, grads, numerics.AdamState(), lr=0.1, trainable={"a": True, "b": False})
    assert np.all(params["a"] < 1.0)
    np.testing.assert_array_equal(params["b"], np.ones(2))


def test_adam_rejects_mismatched_gradient():
    with pytest.raises(ShapeError):
        numerics.adam_step({"w": np.ones(2)}, {"w": np.ones(3)}, numerics.AdamState(), lr=0.1)


def test_learning_rate_schedule():
    schedule = LrSchedule(warmup_steps=100, peak_rate=1e-2, final_rate=1e-3, total_steps=1000)
    assert numerics.lr_at(0, schedule) == 0.0
    assert numerics.lr_at(50, schedule) == pytest.approx(5e-3)
    assert numerics.lr_at(100, schedule) == pytest.approx(1e-2)
    assert numerics.lr_at(550, schedule) == pytest.approx(5.5e-3)
    assert numerics.lr_at(1000, schedule) == pytest.approx(1e-3)
    with pytest.raises(ValueError):
        numerics.lr_at(1001, schedule)


def test_schedule_rejects_warmup_past_total():
    with pytest.raises(ValueError):
        LrSchedule(warmup_steps=10, peak_rate=1e-2, final_rate=1e-3, total_steps=10)


def test_finite_difference_gradient():
    point = np.array([3.0])
    grad = numerics.finite_difference_gradient(lambda x: float(x[0] ** 2), point)
    assert grad[0] == pytest.approx(6.0, abs=1e-8)
    assert point[0] == 3.0

    x = np.array([0.5, -1.0, 2.0])
    np.testing.assert_allclose(numerics.finite_difference_gradient(lambda p: float(p.sum()), x), np.ones(3))
