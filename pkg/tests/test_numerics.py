import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tdal.numerics import (AdamState, ContractError, Mlp, Rng, adam_step, grad_check,
                           softmax, softmax_cross_entropy)


def _zero_net(sizes, output="softmax"):
    return Mlp(list(sizes), [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
               [np.zeros(b) for b in sizes[1:]], "tanh", output)


def test_zero_net_softmax_is_uniform():
    out = _zero_net([4, 5, 3]).forward(np.random.default_rng(0).normal(size=(7, 4)))
    np.testing.assert_allclose(out, np.full((7, 3), 1 / 3), atol=1e-15)


def test_identity_linear_net():
    net = Mlp([3, 3], [np.eye(3)], [np.zeros(3)], "tanh", "linear")
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(net.forward(x), x)


def test_forward_matches_straight_line_oracle():
    net = Mlp.init([2, 3, 2], Rng(0), hidden="tanh", output="softmax")
    W1, b1, W2, b2 = net.params()
    x = [1.0, -1.0]
    h = [math.tanh(sum(x[i] * W1[i, j] for i in range(2)) + b1[j]) for j in range(3)]
    z = [sum(h[j] * W2[j, c] for j in range(3)) + b2[c] for c in range(2)]
    e = [math.exp(v) for v in z]
    expected = [v / sum(e) for v in e]
    out = net.forward(np.array([x]))[0]
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-15)
    # frozen from the scratch oracle run; guards the seed-0 init stream too
    np.testing.assert_allclose(out, [0.5514196330522877, 0.44858036694771236], atol=1e-12)


def test_forward_dimension_mismatch():
    net = Mlp.init([2, 3, 2], Rng(0))
    with pytest.raises(ContractError):
        net.forward(np.zeros((4, 3)))


def test_linear_backward_analytic():
    net = Mlp([1, 1], [np.array([[0.7]])], [np.array([0.3])], "tanh", "linear")
    out, cache = net.forward_cache(np.array([[2.0]]))
    (dw, db), dx = net.backward(cache, np.ones_like(out))
    assert dw[0, 0] == pytest.approx(2.0)
    assert db[0] == pytest.approx(1.0)
    assert dx[0, 0] == pytest.approx(0.7)


def test_fused_cross_entropy_gradient():
    loss, g = softmax_cross_entropy(np.zeros((1, 2)), np.array([0]))
    assert loss == pytest.approx(math.log(2))
    np.testing.assert_allclose(g, [[-0.5, 0.5]])


def test_backward_shape_mismatch():
    net = Mlp.init([2, 3, 2], Rng(0))
    _, cache = net.forward_cache(np.zeros((4, 2)))
    with pytest.raises(ContractError):
        net.backward(cache, np.zeros((4, 3)))


@pytest.mark.parametrize("output", ["linear", "softmax", "sigmoid"])
@pytest.mark.parametrize("hidden", ["tanh", "relu"])
def test_backward_matches_finite_differences(hidden, output):
    rng = np.random.default_rng(1)
    net = Mlp.init([4, 5, 3], Rng(3), hidden=hidden, output=output)
    for b in net.biases:
        b[...] = rng.normal(scale=0.1, size=b.shape)
    x = rng.normal(size=(6, 4))
    direction = rng.normal(size=(6, 3))

    def loss_fn(params):
        out, cache = net.forward_cache(x)
        grads, _ = net.backward(cache, direction)
        return float(np.sum(out * direction)), grads

    assert grad_check(loss_fn, net.params()) <= 1e-5


def test_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    net = Mlp.init([3, 4, 2], Rng(5), output="softmax")
    x = rng.normal(size=(2, 3))
    d = rng.normal(size=(2, 2))

    def loss_fn(params):
        xx = params[0]
        out, cache = net.forward_cache(xx)
        _, dx = net.backward(cache, d)
        return float(np.sum(out * d)), [dx]

    assert grad_check(loss_fn, [x]) <= 1e-7


def test_adam_zero_gradient_is_noop():
    p = [np.array([1.0, -2.0])]
    st_ = AdamState.for_params(p, lr=0.1)
    adam_step(st_, p, [np.zeros(2)])
    np.testing.assert_array_equal(p[0], [1.0, -2.0])


@pytest.mark.parametrize("g", [3.0, -0.01])
def test_adam_first_step_moves_by_lr(g):
    p = [np.array([5.0])]
    st_ = AdamState.for_params(p, lr=0.1)
    adam_step(st_, p, [np.array([g])])
    assert p[0][0] == pytest.approx(5.0 - 0.1 * math.copysign(1, g), abs=1e-6)


def test_adam_converges_on_quadratic():
    w = [np.array([0.0])]
    st_ = AdamState.for_params(w, lr=0.1)
    for _ in range(100):
        adam_step(st_, w, [2.0 * (w[0] - 3.0)])
    assert abs(w[0][0] - 3.0) < 0.1


def test_adam_shape_mismatch():
    p = [np.zeros(2)]
    st_ = AdamState.for_params(p)
    with pytest.raises(ContractError):
        adam_step(st_, p, [np.zeros(3)])


def test_grad_check_quadratic():
    a = np.array([1.0, -2.0, 0.5])
    assert grad_check(lambda ps: (float(np.sum(ps[0] ** 2)), [2 * ps[0]]), [a]) <= 1e-9


def test_grad_check_mlp_cross_entropy():
    rng = np.random.default_rng(0)
    net = Mlp.init([3, 6, 4], Rng(1), output="softmax")
    x, y = rng.normal(size=(8, 3)), rng.integers(0, 4, 8)

    def loss_fn(params):
        _, cache = net.forward_cache(x)
        loss, dl = softmax_cross_entropy(cache["logits"], y)
        return loss, net.backward(cache, dl, wrt="logits")[0]

    assert grad_check(loss_fn, net.params()) <= 1e-5


def test_grad_check_flags_corrupted_gradient():
    a = np.array([1.0, -2.0])
    err = grad_check(lambda ps: (float(np.sum(ps[0] ** 2)), [4 * ps[0]]), [a])
    assert err == pytest.approx(0.5, abs=1e-6)


def test_grad_check_non_finite_loss():
    with pytest.raises(FloatingPointError):
        grad_check(lambda ps: (float("nan"), [ps[0]]), [np.zeros(1)])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (5, 7), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(logits):
    np.testing.assert_allclose(softmax(logits).sum(axis=1), 1.0, atol=1e-9)


def test_rng_streams_are_reproducible_and_order_free():
    a = Rng(7).child("x").gen.random(5)
    root = Rng(7)
    root.child("y").gen.random(100)
    b = root.child("x").gen.random(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(Rng(7).child("x").gen.random(5), Rng(8).child("x").gen.random(5))


def test_same_seed_gives_identical_training_trajectory():
    def train():
        net = Mlp.init([3, 4, 2], Rng(11), output="softmax")
        x = Rng(11, ("data",)).gen.normal(size=(20, 3))
        y = (x[:, 0] > 0).astype(int)
        opt = AdamState.for_params(net.params(), lr=0.05)
        for _ in range(20):
            _, cache = net.forward_cache(x)
            _, dl = softmax_cross_entropy(cache["logits"], y)
            adam_step(opt, net.params(), net.backward(cache, dl, wrt="logits")[0])
        return np.concatenate([p.ravel() for p in net.params()])

    assert np.array_equal(train(), train())
