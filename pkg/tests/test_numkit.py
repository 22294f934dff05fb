import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from simpo.exceptions import NonFiniteError, ShapeError
from simpo.numkit import (
    Mlp,
    RngStream,
    adam_init,
    adam_step,
    finite_diff_grad,
    init_mlp,
    mish,
    mish_grad,
    mlp_backward,
    mlp_forward,
    rng_stream,
    softplus,
)


def test_mish_examples():
    assert mish(0.0) == 0.0
    assert abs(mish(10.0) - 10.0) < 1e-3
    assert abs(mish(-20.0)) < 1e-7


def test_mish_asymptote_and_monotone_on_positive_axis():
    assert abs(mish(20.0) / 20.0 - 1.0) < 1e-6
    x = np.linspace(0, 50, 5001)
    assert np.all(np.diff(mish(x)) > 0)


def test_softplus_is_overflow_safe():
    assert softplus(1000.0) == 1000.0
    assert softplus(-1000.0) == 0.0
    assert softplus(0.0) == pytest.approx(math.log(2.0), abs=1e-15)


@given(st.floats(-700, 700))
def test_softplus_reflection(x):
    # softplus(x) - softplus(-x) = x
    assert softplus(x) - softplus(-x) == pytest.approx(x, abs=1e-12 * max(1.0, abs(x)))


@given(st.floats(-30, 30))
def test_mish_grad_matches_central_difference(x):
    fd = (mish(x + 1e-6) - mish(x - 1e-6)) / 2e-6
    assert mish_grad(x) == pytest.approx(fd, abs=1e-6)


def test_network_activation_agrees_with_reference_mish():
    # the network uses a one-exp form of mish; compare with the softplus form
    net = Mlp((np.eye(3) * 7.0, np.ones((1, 3))), (np.zeros(3), np.zeros(1)))
    x = np.array([[-9.0, 0.3, 4.0], [-100.0, 2.5, 90.0]])
    h = x @ net.weights[0].T
    assert np.allclose(mlp_forward(net, x), mish(h).sum(axis=1, keepdims=True), rtol=1e-14, atol=1e-14)


def test_forward_trivial_cases():
    zero = Mlp((np.zeros((4, 2)), np.zeros((2, 4))), (np.zeros(4), np.array([0.5, -1.5])))
    assert np.array_equal(mlp_forward(zero, np.array([3.0, -2.0])), [0.5, -1.5])
    lin = Mlp((np.array([[2.0]]),), (np.array([1.0]),))
    assert mlp_forward(lin, np.array([3.0]))[0] == 7.0


def test_forward_matches_scripted_evaluation(rng):
    net = init_mlp([3, 5, 4, 2], RngStream(3))
    x = rng.normal(size=3)
    h = x
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        z = w @ h + b
        h = z * np.tanh(np.log1p(np.exp(z)))
    ref = net.weights[-1] @ h + net.biases[-1]
    assert np.allclose(mlp_forward(net, x), ref, rtol=0, atol=1e-12)


def test_forward_batch_equals_rowwise(rng):
    net = init_mlp([3, 8, 1], RngStream(4))
    x = rng.normal(size=(6, 3))
    rows = np.stack([mlp_forward(net, r) for r in x])
    assert np.allclose(mlp_forward(net, x), rows, rtol=1e-14, atol=1e-15)


def test_forward_rejects_wrong_input_size():
    net = init_mlp([3, 4, 1], RngStream(0))
    with pytest.raises(ShapeError):
        mlp_forward(net, np.zeros(2))


def test_mlp_rejects_inconsistent_layers():
    with pytest.raises(ShapeError):
        Mlp((np.zeros((4, 2)), np.zeros((1, 3))), (np.zeros(4), np.zeros(1)))
    with pytest.raises(NonFiniteError):
        Mlp((np.full((1, 1), np.nan),), (np.zeros(1),))


def test_backward_zero_upstream_gives_zero_gradients(rng):
    net = init_mlp([3, 6, 2], RngStream(1))
    grads, gx = mlp_backward(net, rng.normal(size=3), np.zeros(2))
    assert all(np.all(g == 0) for g in grads) and np.all(gx == 0)


def test_backward_linear_layer_is_outer_product():
    w = np.array([[1.0, -2.0], [0.5, 3.0]])
    net = Mlp((w,), (np.zeros(2),))
    x, u = np.array([0.3, -1.2]), np.array([2.0, -1.0])
    grads, gx = mlp_backward(net, x, u)
    assert np.array_equal(grads[0], np.outer(u, x))
    assert np.array_equal(grads[1], u)
    assert np.allclose(gx, w.T @ u)


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    r = RngStream(seed, (7,))
    net = init_mlp([4, 7, 5, 3], r.substream(0))
    x, up = r.normal((3, 4)), r.normal((3, 3))
    grads, _ = mlp_backward(net, x, up)
    f = lambda th: float(np.sum(up * mlp_forward(net.with_flat_params(th), x)))
    fd = finite_diff_grad(f, net.flat_params(), 1e-5)
    i = 0
    for g in grads:  # every tensor separately
        ref = fd[i:i + g.size]
        i += g.size
        err = np.linalg.norm(g.ravel() - ref) / max(np.linalg.norm(ref), 1e-12)
        assert err <= 1e-4


def test_adam_zero_gradient_leaves_params():
    p = [np.array([1.0, -2.0])]
    new, state = adam_step(adam_init(p, lr=0.1), p, [np.zeros(2)])
    assert np.array_equal(new[0], p[0]) and state.step == 1


def test_adam_first_step_closed_form():
    p, g = [np.array([1.0, 1.0])], [np.array([0.3, -4.0])]
    new, _ = adam_step(adam_init(p, lr=0.01), p, g)
    expected = p[0] - 0.01 * g[0] / (np.abs(g[0]) + 1e-8)
    assert np.allclose(new[0], expected, rtol=0, atol=1e-15)


def test_adam_minimizes_quadratic():
    p = [np.array([1.0])]
    state = adam_init(p, lr=0.05)
    for _ in range(100):
        p, state = adam_step(state, p, [2.0 * p[0]])
    assert abs(p[0][0]) < 0.1


def test_adam_rejects_non_finite_gradient():
    p = [np.zeros(2), np.zeros(3)]
    with pytest.raises(NonFiniteError) as info:
        adam_step(adam_init(p), p, [np.zeros(2), np.array([0.0, np.inf, 0.0])])
    assert info.value.index == (1, 1)


def test_finite_diff_examples():
    assert finite_diff_grad(lambda x: x * x, 3.0, 1e-5) == pytest.approx(6.0, abs=1e-9)
    assert finite_diff_grad(lambda x: 4.0, 1.0) == 0.0
    assert finite_diff_grad(np.sin, 1.0, 1e-5) == pytest.approx(math.cos(1.0), abs=1e-8)
    with pytest.raises(ValueError):
        finite_diff_grad(np.sin, 1.0, 0.0)


def test_rng_streams_are_reproducible_and_distinct():
    a, b = rng_stream(42, 0), rng_stream(42, 0)
    assert np.array_equal(a.normal(10), b.normal(10))
    assert rng_stream(42, 0).uniform() != rng_stream(42, 1).uniform()
    s = RngStream(42)
    assert s.substream(1).normal() != s.substream(2).normal()


def test_rng_normal_moments():
    z = rng_stream(7, 3).normal(100_000)
    assert abs(z.mean()) < 0.02 and abs(z.var() - 1.0) < 0.02


def test_identical_seeds_give_identical_training_trajectories():
    def run():
        net = init_mlp([2, 6, 1], RngStream(5))
        x = RngStream(5, (1,)).normal((8, 2))
        params, state = net.params(), adam_init(net.params(), lr=1e-2)
        for _ in range(20):
            grads, _ = mlp_backward(net.with_params(params), x, np.ones((8, 1)))
            params, state = adam_step(state, params, grads)
        return np.concatenate([p.ravel() for p in params])

    assert np.array_equal(run(), run())
