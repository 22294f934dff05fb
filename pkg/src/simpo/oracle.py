"""Exact ground truth on discrete bases in one dimension.

A discrete base measure pushed through a Gaussian noise schedule gives a
Gaussian mixture path, so posteriors, marginal velocities, signed path
densities and scores are all available in closed form. These serve as
oracles for the sample-based machinery in :mod:`simpo.flow` and
:mod:`simpo.normalizer`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from .exceptions import DomainError, InfeasibleError, SingularityError
from .flow import NoiseSchedule, conditional_velocity, schedule_eval
from .normalizer import solve_nu_bisection
from .weighting import WeightingScheme, group_relative_advantage

__all__ = [
    "DiscreteMeasure",
    "MixturePath",
    "LocalQuadratic",
    "target_weights",
    "target_measure",
    "expected_value",
    "improvement_gap",
    "posterior_weights",
    "weighted_marginal_velocity",
    "signed_path_density",
    "path_mass",
    "continuity_residual",
    "ve_score_residual",
    "local_quadratic",
    "repelling_divergence",
]

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class DiscreteMeasure:
    points: np.ndarray
    masses: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        x = np.asarray(self.points, dtype=float).ravel()
        m = np.asarray(self.masses, dtype=float).ravel()
        if x.shape != m.shape or x.size == 0:
            raise DomainError(f"{x.size} points but {m.size} masses")
        if np.unique(x).size != x.size:
            raise DomainError("support points must be distinct")
        if self.normalized and abs(m.sum() - 1.0) > 1e-10:
            raise DomainError(f"masses sum to {m.sum()!r}, expected 1")
        object.__setattr__(self, "points", x)
        object.__setattr__(self, "masses", m)

    @classmethod
    def uniform(cls, points):
        points = np.asarray(points, dtype=float).ravel()
        return cls(points, np.full(points.size, 1.0 / points.size))

    def __len__(self):
        return self.points.size


def _wd1_target(old, q):
    d = softmax(group_relative_advantage(q)) - softmax(-group_relative_advantage(q))
    return 1.0 + q.size * (d - np.dot(old.masses, d))


def target_weights(old: DiscreteMeasure, q, scheme: WeightingScheme):
    """Density ratio of the Stage I target against ``old`` and its normalizer.

    The normalizer solves sum_i old_i * g((q_i - nu)/lam) = 1 by bisection.
    ``wd1`` is made mean-one as 1 + n (d - E_old[d]) with d the dual-softmax
    weights; it has no normalizer (returned as nan).
    """
    q = np.asarray(q, dtype=float).ravel()
    if q.size != len(old):
        raise DomainError(f"{q.size} values for {len(old)} support points")
    if np.any(old.masses < 0):
        raise DomainError("base measure must be non-negative")
    if scheme.variant == "wd1":
        return _wd1_target(old, q), float("nan")
    lam = scheme.lam
    mass = lambda nu: np.array([np.dot(old.masses, scheme.g((q - nu) / lam))])
    hi = q.max()
    if mass(hi)[0] > 1.0:
        raise InfeasibleError("weights exceed unit mass even at the largest value")
    span = max(q.max() - q.min(), lam)
    lo = q.min()
    for _ in range(200):
        if mass(lo)[0] >= 1.0:
            break
        lo -= span
        span *= 2.0
    else:
        raise InfeasibleError("could not bracket the normalizer")
    if lo == hi:
        # constant values with g(0) = 1: the bracket is already the root
        return scheme.g((q - hi) / lam), hi
    nu = solve_nu_bisection(mass, 1.0, (lo, hi), tol=1e-10)
    return scheme.g((q - nu) / lam), nu


def target_measure(old: DiscreteMeasure, q, scheme: WeightingScheme) -> DiscreteMeasure:
    w, _ = target_weights(old, q, scheme)
    return DiscreteMeasure(old.points, old.masses * w)


def expected_value(measure: DiscreteMeasure, values) -> float:
    values = np.asarray(values, dtype=float).ravel()
    if values.size != len(measure):
        raise DomainError(f"{values.size} values for {len(measure)} support points")
    return float(np.dot(measure.masses, values))


def improvement_gap(old: DiscreteMeasure, q, scheme: WeightingScheme):
    """Return ``(gap, covariance)``: E_target[Q] - E_old[Q] and Cov_old[Q, w]."""
    q = np.asarray(q, dtype=float).ravel()
    w, _ = target_weights(old, q, scheme)
    new = DiscreteMeasure(old.points, old.masses * w, normalized=False)
    gap = expected_value(new, q) - expected_value(old, q)
    p = old.masses
    mq = np.dot(p, q)
    mw = np.dot(p, w)
    cov = float(np.dot(p, (q - mq) * (w - mw)))
    return float(gap), cov


@dataclass(frozen=True)
class MixturePath:
    """Noised reweighted base: components N(alpha_t x0_i, sigma_t^2) with
    signed mass w_i * pi_i."""

    base: DiscreteMeasure
    weights: np.ndarray
    schedule: NoiseSchedule = NoiseSchedule("linear")

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        if w.size != len(self.base):
            raise DomainError(f"{w.size} weights for {len(self.base)} base points")
        object.__setattr__(self, "weights", w)

    @property
    def Z(self) -> float:
        return float(np.dot(self.weights, self.base.masses))

    def clipped(self) -> "MixturePath":
        return MixturePath(self.base, np.maximum(self.weights, 0.0), self.schedule)


def _log_components(path, x, t):
    a, s, _, _ = schedule_eval(path.schedule, t)
    x = np.atleast_1d(np.asarray(x, dtype=float))[:, None]
    mu = float(a) * path.base.points[None, :]
    s = float(s)
    return -0.5 * ((x - mu) / s) ** 2 - np.log(s) - _LOG_SQRT_2PI


def posterior_weights(path: MixturePath, x_t, t):
    """p_{0|t}(x0_i | x_t) from base masses only; rows follow ``x_t``."""
    scalar = np.ndim(x_t) == 0
    with np.errstate(divide="ignore"):
        logp = np.log(path.base.masses)[None, :] + _log_components(path, x_t, t)
    norm = logsumexp(logp, axis=1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        raise SingularityError("posterior densities underflow at every component")
    post = np.exp(logp - norm)
    return post[0] if scalar else post


def weighted_marginal_velocity(path: MixturePath, x_t, t):
    """E_post[w v_{t|0}] / E_post[w]; ``SingularityError`` when the weighted
    posterior mass is within 1e-12 of zero."""
    scalar = np.ndim(x_t) == 0
    x = np.atleast_1d(np.asarray(x_t, dtype=float))
    post = posterior_weights(path, x, t)
    pw = post * path.weights[None, :]
    denom = pw.sum(axis=1)
    bad = np.abs(denom) <= 1e-12
    if np.any(bad):
        raise SingularityError(f"weighted posterior mass {denom[bad][0]!r} at x={x[bad][0]!r}",
                               denominator=float(denom[bad][0]))
    v = conditional_velocity(path.schedule, path.base.points[None, :], x[:, None], t)
    out = (pw * v).sum(axis=1) / denom
    return float(out[0]) if scalar else out


def signed_path_density(path: MixturePath, x, t):
    z = path.Z
    if z <= 0:
        raise DomainError(f"total weighted mass Z={z!r} is not positive")
    scalar = np.ndim(x) == 0
    comp = np.exp(_log_components(path, x, t))
    rho = comp @ (path.weights * path.base.masses) / z
    return float(rho[0]) if scalar else rho


def path_mass(path: MixturePath, t, lo, hi, n=20001):
    """Trapezoid quadrature of the signed path density over [lo, hi]."""
    grid = np.linspace(lo, hi, n)
    return float(np.trapezoid(signed_path_density(path, grid, t), grid))


def continuity_residual(path: MixturePath, x, t, h=1e-3):
    """Central-difference d rho/dt + d(rho v)/dx at (x, t)."""
    if t - h <= 0 or t + h > 1:
        raise DomainError(f"t={t} too close to the boundary for step {h}")
    x = np.asarray(x, dtype=float)
    drho = (signed_path_density(path, x, t + h) - signed_path_density(path, x, t - h)) / (2 * h)

    def flux(y):
        return signed_path_density(path, y, t) * weighted_marginal_velocity(path, y, t)

    dflux = (flux(x + h) - flux(x - h)) / (2 * h)
    return drho + dflux


def ve_score_residual(path: MixturePath, x, t):
    """|E_post[grad log p_{t|0}] - grad log p_t| for a variance-exploding path."""
    if path.schedule.variant != "ve":
        raise DomainError("score identity applies to the variance-exploding schedule")
    if not np.allclose(path.weights, 1.0):
        raise DomainError("score identity needs unit weights")
    scalar = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x0 = path.base.points[None, :]
    cond_score = -(x[:, None] - x0) / t
    lhs = (posterior_weights(path, x, t) * cond_score).sum(axis=1)
    # marginal score from the mixture density and its analytic derivative
    s = np.sqrt(t)
    dens = path.base.masses[None, :] * np.exp(-0.5 * ((x[:, None] - x0) / s) ** 2) / (s * np.sqrt(2 * np.pi))
    rhs = (dens * cond_score).sum(axis=1) / dens.sum(axis=1)
    res = np.abs(lhs - rhs)
    return float(res[0]) if scalar else res


@dataclass(frozen=True)
class LocalQuadratic:
    """J(v) = M |v|^2 - 2 v.N + C, the pointwise weighted matching objective."""

    M: float
    N: np.ndarray
    C: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "N", np.atleast_1d(np.asarray(self.N, dtype=float)))

    def value(self, v):
        v = np.atleast_1d(np.asarray(v, dtype=float))
        return float(self.M * v @ v - 2.0 * v @ self.N + self.C)

    def grad(self, v):
        return 2.0 * (self.M * np.atleast_1d(np.asarray(v, dtype=float)) - self.N)

    @property
    def stationary_point(self):
        return self.N / self.M


def local_quadratic(path: MixturePath, x_t: float, t: float) -> LocalQuadratic:
    post = posterior_weights(path, x_t, t)
    v = conditional_velocity(path.schedule, path.base.points, np.full(len(path.base), x_t), t)
    pw = post * path.weights
    return LocalQuadratic(float(pw.sum()), np.array([pw @ v]), float(pw @ (v * v)))


def repelling_divergence(quad: LocalQuadratic, v0, step: float, iters: int):
    """Gradient descent on a concave local objective (M < 0).

    Returns distances to the stationary point N/M, starting with the
    initial one; they grow by the factor (1 - 2 step M) per iteration.
    """
    if quad.M >= 0:
        raise DomainError(f"M={quad.M} >= 0 is the attracting case, not the repelling one")
    v = np.atleast_1d(np.asarray(v0, dtype=float)).copy()
    star = quad.stationary_point
    out = [float(np.linalg.norm(v - star))]
    for _ in range(iters):
        v = v - step * quad.grad(v)
        out.append(float(np.linalg.norm(v - star)))
    return np.array(out)
