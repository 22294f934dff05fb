import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from simpo.exceptions import DomainError, ShapeError
from simpo.flow import (
    NoiseSchedule,
    ReweightedFlowMatcher,
    conditional_velocity,
    integrate_ode,
    make_policy,
    perturb,
    predict_velocity,
    sample_actions,
    schedule_eval,
    time_features,
    weighted_cfm_grad,
    weighted_cfm_loss,
)
from simpo.numkit import Mlp, RngStream, finite_diff_grad
from simpo.oracle import DiscreteMeasure, MixturePath, weighted_marginal_velocity

LIN, VE, COS = NoiseSchedule("linear"), NoiseSchedule("ve"), NoiseSchedule("cosine")


def _policy(seed=0, width=8):
    return make_policy(RngStream(seed, (0,)), hidden_layers=2, hidden_width=width)


def _batch(n=6, seed=1):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 1)), rng.uniform(0.05, 1.0, n), rng.normal(size=(n, 1))


def test_schedule_values():
    assert [float(v) for v in schedule_eval(LIN, 0.25)] == [0.75, 0.25, -1.0, 1.0]
    assert [float(v) for v in schedule_eval(VE, 0.25)] == [1.0, 0.5, 0.0, 1.0]
    with pytest.raises(DomainError):
        schedule_eval(LIN, 0.0)
    with pytest.raises(ValueError):
        NoiseSchedule("sigmoid")


@pytest.mark.parametrize("t", [0.05, 0.3, 0.7, 0.95])
def test_schedule_derivatives_match_finite_differences(t):
    for sched in (LIN, VE, COS):
        a, s, da, ds = schedule_eval(sched, t)
        h = 1e-6
        fa = (schedule_eval(sched, t + h)[0] - schedule_eval(sched, t - h)[0]) / (2 * h)
        fs = (schedule_eval(sched, t + h)[1] - schedule_eval(sched, t - h)[1]) / (2 * h)
        assert abs(fa - da) <= 1e-6 and abs(fs - ds) <= 1e-6


def test_cosine_endpoints():
    a, s, _, _ = schedule_eval(COS, 1.0)
    assert abs(a) < 1e-15 and s == pytest.approx(1.0)


def test_conditional_velocity_examples():
    for t in (0.1, 0.5, 0.9):
        xt = (1 - t) * 1.0 + 0.5 * t
        assert conditional_velocity(LIN, 1.0, xt, t) == pytest.approx(-0.5, abs=1e-12)
    assert conditional_velocity(VE, 0.0, 1.0, 0.25) == pytest.approx(2.0, abs=1e-12)


@given(x0=st.floats(-3, 3), eps=st.floats(-3, 3), t=st.floats(0.01, 1.0))
def test_velocity_on_interpolant(x0, eps, t):
    for sched in (LIN, VE, COS):
        a, s, da, ds = schedule_eval(sched, t)
        xt = perturb(sched, x0, eps, t)
        assert conditional_velocity(sched, x0, xt, t) == pytest.approx(da * x0 + ds * eps, abs=1e-12 * (1 + 1 / s))


def test_perturb_examples():
    assert perturb(LIN, 2.0, 0.7, 1e-9) == pytest.approx(2.0, abs=1e-8)
    assert perturb(LIN, 2.0, 0.7, 1.0) == 0.7
    assert perturb(VE, 2.0, 1.0, 0.25) == pytest.approx(2.5)


def test_time_features():
    f = time_features([0.0, 0.5])
    assert f.shape == (2, 5)
    assert np.allclose(f[1], [0.5, 1.0, 0.0, 0.0, -1.0], atol=1e-15)


def test_cfm_loss_zero_weights_and_exact_fit():
    pol = _policy()
    x0, t, e = _batch()
    assert weighted_cfm_loss(pol, x0, np.zeros(6), t, e) == 0.0
    # a network that outputs exactly v_{t|0} for the single sample: bias only
    xt = perturb(LIN, 0.3, 0.9, 0.4)
    v = conditional_velocity(LIN, 0.3, xt, 0.4)
    net = Mlp((np.zeros((1, 6)),), (np.array([v]),), "mish")
    assert weighted_cfm_loss(pol.with_net(net), [[0.3]], [1.0], [0.4], [[0.9]]) == 0.0


def test_signed_weights_cancel():
    # two identical samples have identical residual norms, so w=(1,-1) cancels exactly
    pol = _policy()
    assert weighted_cfm_loss(pol, [[0.3], [0.3]], [1.0, -1.0], [0.4, 0.4], [[0.9], [0.9]]) == 0.0


def test_cfm_gradient_matches_finite_differences():
    pol = _policy(width=6)
    x0, t, e = _batch()
    w = np.array([1.4, -0.3, 0.8, 2.0, -0.05, 0.6])
    grads = weighted_cfm_grad(pol, x0, w, t, e)
    params = pol.net.params()
    for i, p in enumerate(params):
        def f(v, i=i):
            trial = list(params)
            trial[i] = v.reshape(p.shape)
            return weighted_cfm_loss(pol.with_net(pol.net.with_params(trial)), x0, w, t, e)
        fd = finite_diff_grad(f, p.ravel(), h=1e-6).reshape(p.shape)
        rel = np.linalg.norm(grads[i] - fd) / max(np.linalg.norm(fd), 1e-12)
        assert rel <= 1e-4


def test_gradient_is_linear_in_weights():
    pol = _policy()
    x0, t, e = _batch()
    w = np.linspace(-1, 2, 6)
    g = weighted_cfm_grad(pol, x0, w, t, e)
    gn = weighted_cfm_grad(pol, x0, -w, t, e)
    assert all(np.array_equal(a, -b) for a, b in zip(g, gn))
    assert all(not np.any(z) for z in weighted_cfm_grad(pol, x0, np.zeros(6), t, e))


def test_shape_errors():
    pol = _policy()
    x0, t, e = _batch()
    with pytest.raises(ShapeError):
        weighted_cfm_loss(pol, x0, np.ones(5), t, e)
    with pytest.raises(ShapeError):
        predict_velocity(pol, np.zeros((3, 2)), 0.5)


def test_euler_with_constant_and_zero_fields():
    z = np.array([[0.3], [-1.2]])
    assert np.allclose(integrate_ode(lambda x, t: np.full_like(x, 0.7), z), z - 0.7, atol=1e-14)
    assert np.array_equal(integrate_ode(lambda x, t: np.zeros_like(x), z), z)


def test_oracle_field_transports_noise_to_a_point():
    path = MixturePath(DiscreteMeasure.uniform([0.4]), np.ones(1), LIN)
    z = np.random.default_rng(2).normal(size=200)
    x = integrate_ode(lambda x, t: weighted_marginal_velocity(path, x, t), z, steps=20)
    assert np.max(np.abs(x - 0.4)) <= 0.02


def test_sampling_is_deterministic():
    pol = _policy()
    a = sample_actions(pol, None, 16, RngStream(5, (1,)))
    b = sample_actions(pol, None, 16, RngStream(5, (1,)))
    assert a.shape == (16, 1) and np.array_equal(a, b)
    with pytest.raises(ValueError):
        sample_actions(pol, None, 0, RngStream(5))


def test_estimator_fits_a_point_mass():
    X = np.full(32, 0.5)
    est = ReweightedFlowMatcher(hidden_width=16, max_iter=600, lr=3e-3, noise_draws=2, random_state=0).fit(X)
    assert est.n_iter_ == 600
    s = est.sample(256, rng=RngStream(9))
    assert abs(np.median(s) - 0.5) < 0.1
    again = ReweightedFlowMatcher(hidden_width=16, max_iter=600, lr=3e-3, noise_draws=2, random_state=0).fit(X)
    assert all(np.array_equal(a, b) for a, b in zip(est.policy_.net.params(), again.policy_.net.params()))


def test_estimator_warm_start_continues():
    X = np.linspace(-1, 1, 8)
    est = ReweightedFlowMatcher(hidden_width=8, max_iter=5, warm_start=True).fit(X)
    est.fit(X, sample_weight=np.linspace(2, 0, 8))
    assert est.n_iter_ == 10
    cold = ReweightedFlowMatcher(hidden_width=8, max_iter=5).fit(X)
    cold.fit(X)
    assert cold.n_iter_ == 5
    with pytest.raises(ShapeError):
        est.fit(X, sample_weight=np.ones(3))
