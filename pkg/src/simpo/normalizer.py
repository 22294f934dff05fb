"""Normalizer solvers: find nu so that the batch weights average to one.

Closed forms exist for the exponential, linear and squared rules (active-set
scans over the sorted batch). Power and floored rules go through a
safeguarded bisection, which also serves as the independent oracle for the
closed forms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import logsumexp, softmax
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import BracketError, InfeasibleError, SimpoError, UnsupportedError
from .weighting import (
    MEAN_ONE,
    WeightingScheme,
    WeightVector,
    as_values,
    evaluate_weights,
    wd1_weights,
    group_relative_advantage,
)

__all__ = [
    "NormalizerResult",
    "solve_nu_exp",
    "solve_nu_linear",
    "solve_nu_square",
    "solve_nu_power",
    "solve_nu_floor",
    "solve_nu_bisection",
    "solve_nu",
    "normalized_weights",
    "kkt_residual",
    "TargetMeasureWeighter",
]


@dataclass(frozen=True)
class NormalizerResult:
    nu: float
    k: int
    residual: float


def _result(scheme, q, nu, k):
    w = evaluate_weights(scheme, q, nu).values
    return NormalizerResult(float(nu), int(k), float(abs(w.mean() - 1.0)))


def solve_nu_exp(q, lam: float) -> NormalizerResult:
    q = as_values(q)
    nu = lam * (logsumexp(q / lam) - math.log(q.size))
    return _result(WeightingScheme("exp", lam), q, nu, q.size)


def _sorted_stats(q):
    xs = np.sort(q)[::-1]
    k = np.arange(1, q.size + 1)
    return xs, k, np.cumsum(xs)


def solve_nu_linear(q, lam: float) -> NormalizerResult:
    q = as_values(q)
    n = q.size
    xs, ks, c1 = _sorted_stats(q)
    target = n * lam
    excess = c1 - ks * xs
    k = max(int(np.sum(excess < target)), 1)
    nu = (c1[k - 1] - target) / k
    return _result(WeightingScheme("linear", lam), q, nu, k)


def solve_nu_square(q, lam: float) -> NormalizerResult:
    q = as_values(q)
    n = q.size
    xs, ks, c1 = _sorted_stats(q)
    c2 = np.cumsum(xs * xs)
    target = n * lam * lam
    energy = c2 - 2.0 * xs * c1 + ks * xs * xs
    k = max(int(np.sum(energy < target)), 1)
    s1, s2 = c1[k - 1], c2[k - 1]
    disc = s1 * s1 - k * (s2 - target)
    if disc < 0:
        # k satisfies E_k < target, which forces disc >= k * (target - E_k) > 0
        if disc < -1e-9 * max(1.0, s1 * s1):
            raise SimpoError(f"negative discriminant {disc!r} for active set size {k}")
        disc = 0.0
    nu = (s1 - math.sqrt(disc)) / k
    return _result(WeightingScheme("square", lam), q, nu, k)


def solve_nu_bisection(weight_map: Callable[[float], np.ndarray], target_mean: float = 1.0,
                       bracket: tuple = (-1.0, 1.0), tol: float = 1e-10, max_iter: int = 200) -> float:
    """Root of ``mean(weight_map(nu)) == target_mean`` for a decreasing map.

    Bisects until the bracket stops shrinking in floating point, so the
    returned nu is as accurate as the map allows, not merely within ``tol``.
    """
    lo, hi = float(bracket[0]), float(bracket[1])
    if not lo < hi:
        raise BracketError(f"bracket ({lo}, {hi}) is empty")
    m_lo = float(np.mean(weight_map(lo)))
    m_hi = float(np.mean(weight_map(hi)))
    if not (m_lo >= target_mean >= m_hi):
        raise BracketError(f"bracket ({lo}, {hi}) has means ({m_lo}, {m_hi}) not straddling {target_mean}",
                           low_mean=m_lo, high_mean=m_hi)
    if m_lo == target_mean:
        return lo
    if m_hi == target_mean:
        return hi
    best, best_err = lo, abs(m_lo - target_mean)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        m = float(np.mean(weight_map(mid)))
        err = abs(m - target_mean)
        if err < best_err:
            best, best_err = mid, err
        if m == target_mean:
            return mid
        if m > target_mean:
            lo = mid
        else:
            hi = mid
    if best_err > tol:
        raise BracketError(f"bisection stalled with residual {best_err!r}")
    return best


def _polish_piecewise_linear(q, lam, floor, nu):
    # the floored map is linear on the active set identified by bisection
    n = q.size
    active = (q - nu) / lam > floor
    k = int(active.sum())
    if k == 0:
        return nu, k
    exact = (q[active].sum() - lam * (n - floor * (n - k))) / k
    if np.array_equal((q - exact) / lam > floor, active):
        return exact, k
    return nu, k


def solve_nu_floor(q, lam: float, floor: float) -> NormalizerResult:
    """Normalizer for max((q - nu)/lam, floor); needs floor < 1."""
    q = as_values(q)
    if floor >= 1:
        raise InfeasibleError(f"floor {floor} >= 1 makes mean-one weights unreachable")
    n = q.size
    scheme = WeightingScheme("linear_negative", lam, floor=floor) if floor < 0 else None
    g = (lambda nu: np.maximum((q - nu) / lam, floor))
    lo = q.min() - lam * (1.0 - floor) * n
    nu = solve_nu_bisection(g, 1.0, (lo, q.max()))
    nu, k = _polish_piecewise_linear(q, lam, floor, nu)
    if scheme is None:
        w = g(nu)
        return NormalizerResult(float(nu), k, float(abs(w.mean() - 1.0)))
    return _result(scheme, q, nu, k)


def solve_nu_power(q, lam: float, alpha: float) -> NormalizerResult:
    q = as_values(q)
    n = q.size
    scheme = WeightingScheme("power", lam, alpha=alpha)
    # at this nu the top sample alone carries weight 2^(1/(alpha-1)) N >= N
    lo = q.max() - 2.0 * lam * n ** (alpha - 1.0)
    nu = solve_nu_bisection(lambda v: scheme.g((q - v) / lam), 1.0, (lo, q.max()))
    k = int(np.sum(q > nu))
    return _result(scheme, q, nu, k)


def solve_nu(scheme: WeightingScheme, q) -> NormalizerResult:
    v, lam = scheme.variant, scheme.lam
    if v == "exp":
        return solve_nu_exp(q, lam)
    if v == "linear":
        return solve_nu_linear(q, lam)
    if v == "square":
        return solve_nu_square(q, lam)
    if v == "power":
        return solve_nu_power(q, lam, scheme.alpha)
    if v == "linear_negative":
        return solve_nu_floor(q, lam, scheme.floor)
    raise UnsupportedError("wd1 weights are self-normalizing (sum zero) and have no normalizer")


def normalized_weights(scheme: WeightingScheme, q):
    """Stage I on a batch: returns ``(WeightVector, NormalizerResult | None)``."""
    q = as_values(q)
    if scheme.variant == "wd1":
        return wd1_weights(group_relative_advantage(q)), None
    res = solve_nu(scheme, q)
    if scheme.variant == "exp":
        w = q.size * softmax(q / scheme.lam)
        return WeightVector(w, MEAN_ONE), res
    w = evaluate_weights(scheme, q, res.nu).values
    return WeightVector(w, MEAN_ONE), res


def _inverse_weight_map(scheme):
    v = scheme.variant
    if v == "exp":
        return np.log
    if v in ("linear", "linear_negative"):
        return lambda w: w
    if v == "square":
        return np.sqrt
    if v == "power":
        return lambda w: w ** (scheme.alpha - 1.0)
    raise UnsupportedError(f"scheme {v!r} has no closed-form generator")


def kkt_residual(scheme: WeightingScheme, q, lam: float | None = None, nu: float = 0.0, weights=None) -> float:
    """Largest violation of stationarity, complementary slackness and
    normalization for weights at ``nu``.

    Stationarity compares f'(w_i) with (q_i - nu)/lam on active samples;
    inactive samples must sit at or below the clip level; the batch mean must
    be one. ``weights`` defaults to the scheme's map at ``nu``.
    """
    q = as_values(q)
    lam = scheme.lam if lam is None else lam
    scheme = scheme.with_lam(lam)
    fprime = _inverse_weight_map(scheme)
    x = (q - nu) / lam
    w = evaluate_weights(scheme, q, nu).values if weights is None else np.asarray(weights, dtype=float)
    clip = scheme.clip_level
    active = w > clip if np.isfinite(clip) else np.ones(q.size, dtype=bool)
    stat = float(np.max(np.abs(fprime(w[active]) - x[active]))) if active.any() else 0.0
    slack = float(np.max(np.maximum(0.0, x[~active] - clip))) if (~active).any() else 0.0
    primal = float(abs(w.mean() - 1.0))
    return max(stat, slack, primal)


class TargetMeasureWeighter(TransformerMixin, BaseEstimator):
    """Turn a batch of action values into Stage I target-measure weights.

    ``fit`` solves the normalizer on a batch; ``transform`` maps values to
    weights with the fitted normalizer, so ``fit_transform`` on one batch
    yields mean-one weights (sum-zero for ``wd1``).

    Parameters
    ----------
    scheme : {"exp", "linear", "square", "power", "linear_negative", "wd1"}
    lam : float
        Temperature.
    floor : float
        Negative weight floor for ``linear_negative``.
    alpha : float
        Divergence order for ``power`` (weights use exponent 1/(alpha-1)).
    """

    def __init__(self, scheme="exp", lam=1.0, floor=-0.05, alpha=1.5):
        self.scheme = scheme
        self.lam = lam
        self.floor = floor
        self.alpha = alpha

    def _validate(self, X):
        X = check_array(X, ensure_2d=False, dtype=np.float64)
        return as_values(X, min_size=2)

    def fit(self, X, y=None):
        q = self._validate(X)
        self.scheme_ = WeightingScheme(self.scheme, self.lam, self.floor, self.alpha)
        if self.scheme_.variant == "wd1":
            self.nu_, self.n_active_, self.residual_ = float("nan"), q.size, 0.0
        else:
            res = solve_nu(self.scheme_, q)
            self.nu_, self.n_active_, self.residual_ = res.nu, res.k, res.residual
        self.n_samples_fit_ = q.size
        return self

    def transform(self, X):
        check_is_fitted(self, "scheme_")
        q = self._validate(X)
        return evaluate_weights(self.scheme_, q, 0.0 if self.scheme_.variant == "wd1" else self.nu_).values

    def kkt_residual(self, X):
        check_is_fitted(self, "scheme_")
        return kkt_residual(self.scheme_, self._validate(X), self.lam, self.nu_)
