"""Flow policies: noise schedules, conditional velocities, reweighted
conditional flow matching and Euler ODE sampling.

Time runs from data (t=0) to noise (t=1); sampling integrates backwards from
t=1. The conditional velocity has a 1/sigma singularity at t=0, so training
times and the ODE endpoint are clamped at ``t_min``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import DomainError, NonFiniteError, ShapeError
from .numkit import Mlp, RngStream, adam_init, adam_step, init_mlp, mlp_backward, mlp_forward
from .weighting import SampleBatch

__all__ = [
    "T_MIN",
    "NoiseSchedule",
    "schedule_eval",
    "conditional_velocity",
    "perturb",
    "time_features",
    "FlowPolicy",
    "make_policy",
    "predict_velocity",
    "weighted_cfm_loss",
    "weighted_cfm_grad",
    "integrate_ode",
    "sample_actions",
    "ReweightedFlowMatcher",
]

T_MIN = 1e-3
SCHEDULES = ("linear", "ve", "cosine")
N_TIME_FEATURES = 5


@dataclass(frozen=True)
class NoiseSchedule:
    """``linear``: alpha=1-t, sigma=t. ``ve``: alpha=1, sigma=sqrt(t).
    ``cosine``: alpha^2 = f(t)/f(0) with f(t) = cos^2(((t+s)/(1+s)) pi/2)."""

    variant: str = "linear"
    offset: float = 0.008

    def __post_init__(self):
        if self.variant not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.variant!r}; expected one of {SCHEDULES}")

    def __call__(self, t):
        return schedule_eval(self, t)


def _check_time(t):
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0) or np.any(t > 1) or not np.all(np.isfinite(t)):
        raise DomainError("time must lie in (0, 1]")
    return t


def schedule_eval(sched: NoiseSchedule, t):
    """Return ``(alpha, sigma, d alpha/dt, d sigma/dt)`` at ``t``."""
    t = _check_time(t)
    if sched.variant == "linear":
        one = np.ones_like(t)
        return 1.0 - t, t, -one, one
    if sched.variant == "ve":
        s = np.sqrt(t)
        return np.ones_like(t), s, np.zeros_like(t), 0.5 / s
    s = sched.offset
    rate = 0.5 * math.pi / (1.0 + s)
    theta = (t + s) * rate
    c0 = math.cos(s * rate)
    alpha = np.cos(theta) / c0
    sigma = np.sqrt(np.maximum(1.0 - alpha * alpha, 0.0))
    dalpha = -np.sin(theta) * rate / c0
    dsigma = -alpha * dalpha / sigma
    return alpha, sigma, dalpha, dsigma


def _bcast(coef, x):
    coef = np.asarray(coef, dtype=float)
    x = np.asarray(x, dtype=float)
    if coef.ndim == 1 and x.ndim == 2:
        return coef[:, None]
    return coef


def conditional_velocity(sched: NoiseSchedule, x0, x_t, t):
    """((sigma*alpha' - sigma'*alpha)/sigma) x0 + (sigma'/sigma) x_t."""
    a, s, da, ds = schedule_eval(sched, t)
    x0 = np.asarray(x0, dtype=float)
    x_t = np.asarray(x_t, dtype=float)
    c0 = _bcast((s * da - ds * a) / s, x0)
    c1 = _bcast(ds / s, x_t)
    return c0 * x0 + c1 * x_t


def perturb(sched: NoiseSchedule, x0, noise, t):
    a, s, _, _ = schedule_eval(sched, t)
    x0 = np.asarray(x0, dtype=float)
    return _bcast(a, x0) * x0 + _bcast(s, x0) * np.asarray(noise, dtype=float)


def time_features(t):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    w = math.pi * t
    return np.stack([t, np.sin(w), np.cos(w), np.sin(2 * w), np.cos(2 * w)], axis=1)


@dataclass(frozen=True)
class FlowPolicy:
    """Velocity predictor D(context, a_t, t) with its schedule and sampler."""

    net: Mlp
    schedule: NoiseSchedule
    action_dim: int = 1
    context_dim: int = 0
    steps: int = 20
    t_min: float = T_MIN

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("sampler needs at least one step")
        expected = self.context_dim + self.action_dim + N_TIME_FEATURES
        if self.net.n_inputs != expected:
            raise ShapeError(f"network takes {self.net.n_inputs} inputs, policy needs {expected}")
        if self.net.n_outputs != self.action_dim:
            raise ShapeError(f"network emits {self.net.n_outputs} outputs for action dim {self.action_dim}")

    def with_net(self, net: Mlp) -> "FlowPolicy":
        return FlowPolicy(net, self.schedule, self.action_dim, self.context_dim, self.steps, self.t_min)


def make_policy(rng: RngStream, action_dim=1, context_dim=0, hidden_layers=2, hidden_width=64,
                schedule="linear", steps=20, activation="mish") -> FlowPolicy:
    sizes = [context_dim + action_dim + N_TIME_FEATURES] + [hidden_width] * hidden_layers + [action_dim]
    sched = schedule if isinstance(schedule, NoiseSchedule) else NoiseSchedule(schedule)
    return FlowPolicy(init_mlp(sizes, rng, activation), sched, action_dim, context_dim, steps)


def _inputs(policy: FlowPolicy, x_t, t, context):
    x_t = np.asarray(x_t, dtype=float)
    if x_t.ndim == 1:
        x_t = x_t.reshape(-1, policy.action_dim)
    n = x_t.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
    parts = []
    if policy.context_dim:
        if context is None:
            raise ShapeError(f"policy expects a context of size {policy.context_dim}")
        c = np.asarray(context, dtype=float)
        parts.append(np.broadcast_to(c, (n, policy.context_dim)))
    parts.append(x_t)
    parts.append(time_features(t))
    return np.concatenate(parts, axis=1)


def predict_velocity(policy: FlowPolicy, x_t, t, context=None):
    return mlp_forward(policy.net, _inputs(policy, x_t, t, context))


def _cfm_terms(policy, actions, weights, times, noises, context):
    if isinstance(actions, SampleBatch):
        context = actions.context if context is None else context
        actions = actions.actions
    x0 = np.asarray(actions, dtype=float)
    if x0.ndim == 1:
        x0 = x0.reshape(-1, policy.action_dim)
    w = np.asarray(weights, dtype=float).ravel()
    t = np.asarray(times, dtype=float).ravel()
    eps = np.asarray(noises, dtype=float).reshape(x0.shape)
    if w.size != x0.shape[0] or t.size != x0.shape[0]:
        raise ShapeError(f"{x0.shape[0]} samples, {w.size} weights, {t.size} times")
    x_t = perturb(policy.schedule, x0, eps, t)
    target = conditional_velocity(policy.schedule, x0, x_t, t)
    inputs = _inputs(policy, x_t, t, context)
    return w, inputs, target


def weighted_cfm_loss(policy: FlowPolicy, actions, weights, times, noises, context=None) -> float:
    """mean_i w_i ||D(a_t, t) - v_{t|0}||^2; weights may be negative."""
    w, inputs, target = _cfm_terms(policy, actions, weights, times, noises, context)
    resid = mlp_forward(policy.net, inputs) - target
    return float(np.mean(w * np.sum(resid * resid, axis=1)))


def weighted_cfm_grad(policy: FlowPolicy, actions, weights, times, noises, context=None):
    """Exact parameter gradients of :func:`weighted_cfm_loss`."""
    w, inputs, target = _cfm_terms(policy, actions, weights, times, noises, context)
    resid = mlp_forward(policy.net, inputs) - target
    upstream = (2.0 / w.size) * w[:, None] * resid
    grads, _ = mlp_backward(policy.net, inputs, upstream)
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter tensor {i}", index=i)
    return grads


def integrate_ode(velocity_fn, x, steps=20, t_min=T_MIN):
    """Euler from t=1 down to ``t_min`` on a uniform grid, then one linear
    extrapolation step to t=0."""
    x = np.array(x, dtype=float)
    grid = np.linspace(1.0, t_min, steps + 1)
    for t0, t1 in zip(grid[:-1], grid[1:]):
        x = x + (t1 - t0) * velocity_fn(x, t0)
    return x - t_min * velocity_fn(x, t_min)


def sample_actions(policy: FlowPolicy, context, count: int, rng: RngStream):
    if count < 1:
        raise ValueError("count must be at least 1")
    _, sigma1, _, _ = schedule_eval(policy.schedule, 1.0)
    z = float(sigma1) * rng.normal((count, policy.action_dim))
    return integrate_ode(lambda x, t: predict_velocity(policy, x, t, context), z, policy.steps, policy.t_min)


def draw_times(rng: RngStream, n, t_min=T_MIN):
    return rng.uniform(t_min, 1.0, size=n)


class ReweightedFlowMatcher(BaseEstimator):
    """Flow policy trained by (signed) reweighted conditional flow matching.

    ``fit(X, sample_weight=w)`` runs ``max_iter`` Adam steps on
    ``mean(w * ||D - v_{t|0}||^2)`` with fresh times and noises each step;
    with ``warm_start=True`` repeated fits continue from the current network
    and optimizer state. ``sample`` draws actions by Euler integration.
    """

    def __init__(self, hidden_layers=2, hidden_width=64, activation="mish", schedule="linear",
                 sampler_steps=20, lr=1e-3, max_iter=100, noise_draws=1, t_min=T_MIN,
                 warm_start=False, random_state=0):
        self.hidden_layers = hidden_layers
        self.hidden_width = hidden_width
        self.activation = activation
        self.schedule = schedule
        self.sampler_steps = sampler_steps
        self.lr = lr
        self.max_iter = max_iter
        self.noise_draws = noise_draws
        self.t_min = t_min
        self.warm_start = warm_start
        self.random_state = random_state

    def _init(self, action_dim, context_dim):
        self.rng_ = RngStream(self.random_state, (1,))
        policy = make_policy(RngStream(self.random_state, (0,)), action_dim, context_dim, self.hidden_layers,
                             self.hidden_width, self.schedule, self.sampler_steps, self.activation)
        self.policy_ = FlowPolicy(policy.net, policy.schedule, action_dim, context_dim,
                                  self.sampler_steps, self.t_min)
        self.optimizer_ = adam_init(self.policy_.net.params(), lr=self.lr)
        self.n_iter_ = 0
        self.loss_curve_ = []

    def fit(self, X, y=None, sample_weight=None, context=None):
        X = check_array(X, ensure_2d=False, dtype=np.float64)
        X = X[:, None] if X.ndim == 1 else X
        ctx = None if context is None else np.atleast_2d(np.asarray(context, dtype=float))
        if ctx is not None and ctx.shape[0] not in (1, X.shape[0]):
            raise ShapeError(f"context has {ctx.shape[0]} rows for {X.shape[0]} actions")
        context_dim = 0 if ctx is None else ctx.shape[1]
        if not (self.warm_start and hasattr(self, "policy_")):
            self._init(X.shape[1], context_dim)
        elif self.policy_.action_dim != X.shape[1] or self.policy_.context_dim != context_dim:
            raise ShapeError("warm start with mismatched action or context dimension")
        w = np.ones(X.shape[0]) if sample_weight is None else np.asarray(sample_weight, dtype=float).ravel()
        if w.size != X.shape[0]:
            raise ShapeError(f"{w.size} weights for {X.shape[0]} samples")
        if not np.all(np.isfinite(w)):
            raise NonFiniteError("sample weights must be finite")
        reps = max(int(self.noise_draws), 1)
        x0 = np.repeat(X, reps, axis=0)
        wr = np.repeat(w, reps)
        cr = None if ctx is None or ctx.shape[0] == 1 else np.repeat(ctx, reps, axis=0)
        cr = ctx if cr is None else cr
        self.optimizer_.lr = self.lr
        params = self.policy_.net.params()
        for _ in range(int(self.max_iter)):
            t = draw_times(self.rng_, x0.shape[0], self.t_min)
            eps = self.rng_.normal(x0.shape)
            pol = self.policy_.with_net(self.policy_.net.with_params(params))
            grads = weighted_cfm_grad(pol, x0, wr, t, eps, cr)
            params, self.optimizer_ = adam_step(self.optimizer_, params, grads)
            self.n_iter_ += 1
        self.policy_ = self.policy_.with_net(self.policy_.net.with_params(params))
        return self

    def loss(self, X, sample_weight=None, context=None, rng=None):
        """Monte Carlo weighted CFM loss on ``X`` (one time/noise draw per row)."""
        check_is_fitted(self, "policy_")
        X = check_array(X, ensure_2d=False, dtype=np.float64)
        X = X[:, None] if X.ndim == 1 else X
        rng = rng or RngStream(self.random_state, (2,))
        w = np.ones(X.shape[0]) if sample_weight is None else sample_weight
        t = draw_times(rng, X.shape[0], self.t_min)
        return weighted_cfm_loss(self.policy_, X, w, t, rng.normal(X.shape), context)

    def predict(self, X_t, t, context=None):
        """Velocity D(context, x_t, t)."""
        check_is_fitted(self, "policy_")
        return predict_velocity(self.policy_, X_t, _check_time(t), context)

    def sample(self, n_samples=1, context=None, rng=None):
        check_is_fitted(self, "policy_")
        rng = rng if rng is not None else self.rng_
        return sample_actions(self.policy_, context, n_samples, rng)
