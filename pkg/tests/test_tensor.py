import threading

import numpy as np
import pytest

from conftest import numeric_grad, rel_err
from scama.tensor import (
    Tensor,
    concat,
    concat_lastdim,
    cross_entropy_smoothed,
    dropout,
    embed,
    glorot,
    is_grad_enabled,
    layer_norm,
    log_softmax_lastdim,
    matmul,
    no_grad,
    relu,
    softmax_lastdim,
    tap_filter,
)

rng = np.random.default_rng(0)


def param(*shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def check_grads(loss_fn, params, tol=1e-6):
    loss = loss_fn()
    for p in params:
        p.grad = None
    loss.backward()
    for p in params:
        num = numeric_grad(lambda: loss_fn().item(), p.data)
        assert rel_err(p.grad, num) < tol, p.shape


def test_matmul_examples():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(eye, m).data, m.data)
    np.testing.assert_array_equal(matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_gradient():
    a, b = param(3, 4), param(4, 2)
    check_grads(lambda: matmul(a, b).sum(), [a, b])


def test_matmul_batched_gradient():
    a, b = param(2, 3, 4), param(2, 4, 5)
    w = rng.normal(size=(2, 3, 5))
    check_grads(lambda: (matmul(a, b) * Tensor(w)).sum(), [a, b])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 2\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_softmax_examples():
    np.testing.assert_allclose(softmax_lastdim(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(softmax_lastdim(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(softmax_lastdim(Tensor([np.log(1), np.log(3)])).data, [0.25, 0.75], atol=1e-15)


def test_softmax_rows_property():
    x = Tensor(rng.normal(scale=5, size=(20, 7)))
    p = softmax_lastdim(x).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-9)
    assert np.all((p > 0) & (p < 1))


def test_softmax_nonfinite_raises():
    with pytest.raises(FloatingPointError):
        softmax_lastdim(Tensor([np.nan, 1.0]))


def test_softmax_and_log_softmax_gradients():
    x = param(3, 5)
    w = Tensor(rng.normal(size=(3, 5)))
    check_grads(lambda: (softmax_lastdim(x) * w).sum(), [x])
    check_grads(lambda: (log_softmax_lastdim(x) * w).sum(), [x])


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(2)), Tensor(np.zeros(2))
    np.testing.assert_allclose(layer_norm(Tensor([4.0, 4.0]), one, zero).data, [0.0, 0.0])
    np.testing.assert_allclose(layer_norm(Tensor([1.0, 3.0]), one, zero).data, [-1.0, 1.0], atol=1e-3)


def test_layer_norm_gradient():
    x, g, b = param(4, 6), param(6), param(6)
    w = Tensor(rng.normal(size=(4, 6)))
    check_grads(lambda: (layer_norm(x, g, b) * w).sum(), [x, g, b], tol=1e-5)


def test_relu_and_add():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])
    a, b = param(3, 4), param(4)
    w = Tensor(rng.normal(size=(3, 4)))
    check_grads(lambda: (relu(a + b) * w).sum(), [a, b])


def test_broadcast_mul_sub_gradients():
    a, b = param(2, 3, 4), param(3, 1)
    check_grads(lambda: ((a * b) - b).sum(), [a, b])


def test_concat_gradient():
    a, b = param(2, 3), param(2, 5)
    w = Tensor(rng.normal(size=(2, 8)))
    check_grads(lambda: (concat_lastdim([a, b]) * w).sum(), [a, b])
    c, d = param(1, 3), param(4, 3)
    w2 = Tensor(rng.normal(size=(5, 3)))
    check_grads(lambda: (concat([c, d], axis=0) * w2).sum(), [c, d])


def test_getitem_reshape_transpose_gradients():
    a = param(3, 4, 2)
    w = Tensor(rng.normal(size=(2, 4, 2)))
    check_grads(lambda: (a[1:].transpose(0, 1, 2).reshape(2, 4, 2) * w).sum(), [a])
    idx = np.array([0, 2, 2])
    check_grads(lambda: a[idx].sum(), [a])


def test_exp_log_mean_gradients():
    a = Tensor(rng.uniform(0.5, 2.0, size=(3, 3)), requires_grad=True)
    check_grads(lambda: (a.log() + a.exp()).mean(), [a])


def test_embed_gradient_accumulates_repeats():
    table = param(5, 3)
    ids = np.array([[1, 1], [4, 0]])
    w = Tensor(rng.normal(size=(2, 2, 3)))
    check_grads(lambda: (embed(table, ids) * w).sum(), [table])


def test_dropout_identity_cases():
    x = Tensor(rng.normal(size=(4, 4)))
    assert dropout(x, 0.0, rng, True) is x
    assert dropout(x, 0.5, rng, False) is x


def test_dropout_inverted_scale_and_range():
    x = Tensor(np.ones((200, 200)))
    y = dropout(x, 0.25, np.random.default_rng(1), True).data
    assert set(np.unique(y)) <= {0.0, 1.0 / 0.75}
    assert abs(y.mean() - 1.0) < 0.02
    with pytest.raises(ValueError):
        dropout(x, 1.0, rng, True)
    with pytest.raises(ValueError):
        dropout(x, -0.1, rng, True)


def test_cross_entropy_uniform_is_log_v():
    V = 7
    loss = cross_entropy_smoothed(Tensor(np.zeros((3, V))), [0, 3, 6], 0.0)
    assert loss.item() == pytest.approx(np.log(V), abs=1e-12)


def test_cross_entropy_matches_explicit_formula():
    logits = rng.normal(size=(4, 5))
    target = np.array([0, 4, 2, 2])
    s = 0.1
    q = np.full((4, 5), s / 4)
    q[np.arange(4), target] = 1 - s
    logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    expected = -(q * logp).sum(-1).mean()
    assert cross_entropy_smoothed(Tensor(logits), target, s).item() == pytest.approx(expected, abs=1e-12)


def test_cross_entropy_smoothing_floor():
    logits = np.full((1, 4), -30.0)
    logits[0, 2] = 30.0
    assert cross_entropy_smoothed(Tensor(logits), [2], 0.1).item() > 0.1


def test_cross_entropy_gradient_with_weights():
    x = param(2, 3, 5)
    target = np.array([[1, 0, 4], [2, 2, 0]])
    w = np.array([[1.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    check_grads(lambda: cross_entropy_smoothed(x, target, 0.1, w), [x])
    check_grads(lambda: cross_entropy_smoothed(x, target, 0.0, w, reduction="sum"), [x])


def test_cross_entropy_errors():
    with pytest.raises(ValueError):
        cross_entropy_smoothed(Tensor(np.zeros((1, 3))), [0], 1.0)
    with pytest.raises(ValueError):
        cross_entropy_smoothed(Tensor(np.zeros((1, 3))), [0], -0.1)
    with pytest.raises(ValueError):
        cross_entropy_smoothed(Tensor(np.zeros((2, 3))), [0], 0.0)


def test_tap_filter_gradient():
    v, back, fwd = param(2, 6, 3), param(3, 3), param(2, 3)
    w = Tensor(rng.normal(size=(2, 6, 3)))
    check_grads(lambda: (tap_filter(v, back, fwd) * w).sum(), [v, back, fwd])


def test_backward_examples():
    x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    y = Tensor([1.0, 2.0], requires_grad=True)
    (y * y).sum().backward()
    np.testing.assert_array_equal(y.grad, [2.0, 4.0])


def test_backward_accumulates_without_reset():
    y = Tensor([1.0, 2.0], requires_grad=True)
    (y * y).sum().backward()
    (y * y).sum().backward()
    np.testing.assert_array_equal(y.grad, [4.0, 8.0])
    y.zero_grad()
    assert y.grad is None or not np.any(y.grad)


def test_backward_non_scalar_raises():
    with pytest.raises(ValueError):
        (Tensor([1.0, 2.0], requires_grad=True) * 2.0).backward()


def test_shared_subexpression_gradient():
    a = param(3)
    check_grads(lambda: ((a * a) * (a * a)).sum() + (a * a).sum(), [a])


def test_no_grad_is_thread_local():
    seen = {}

    def worker():
        seen["other"] = is_grad_enabled()

    with no_grad():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
        assert not is_grad_enabled()
        y = Tensor([1.0], requires_grad=True) * 2.0
        assert not y.requires_grad
    assert seen["other"] is True
    assert is_grad_enabled()


def test_glorot_bound_and_determinism():
    w = glorot((30, 50), np.random.default_rng(5))
    assert np.abs(w.data).max() <= np.sqrt(6 / 80)
    np.testing.assert_array_equal(w.data, glorot((30, 50), np.random.default_rng(5)).data)


def test_deep_graph_does_not_recurse():
    x = Tensor([1.0], requires_grad=True)
    y = x
    for _ in range(5000):
        y = y + 0.0
    y.sum().backward()
    assert x.grad[0] == 1.0
