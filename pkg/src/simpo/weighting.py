"""Weight maps g((q - nu) / lam), the wd1 dual-softmax rule and f-divergences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import softmax, xlogy

from .exceptions import DomainError, NonFiniteError

__all__ = [
    "SCHEMES",
    "WeightingScheme",
    "WeightVector",
    "MEAN_ONE",
    "SUM_ZERO",
    "UNNORMALIZED",
    "as_values",
    "evaluate_weights",
    "group_relative_advantage",
    "wd1_weights",
    "f_divergence_value",
    "SampleBatch",
]

SCHEMES = ("exp", "linear", "square", "power", "linear_negative", "wd1")

MEAN_ONE = "mean_one"
SUM_ZERO = "sum_zero"
UNNORMALIZED = "unnormalized"

STD_FLOOR = 1e-6


@dataclass(frozen=True)
class WeightingScheme:
    """A monotone weight rule plus its parameters.

    ``floor`` is only read by ``linear_negative`` and ``alpha`` only by
    ``power``. Constant prefactors of the inverse derivative are absorbed
    into ``lam``.
    """

    variant: str = "exp"
    lam: float = 1.0
    floor: float = -0.05
    alpha: float = 1.5

    def __post_init__(self):
        if self.variant not in SCHEMES:
            raise ValueError(f"unknown scheme {self.variant!r}; expected one of {SCHEMES}")
        if not self.lam > 0:
            raise ValueError(f"temperature must be positive, got {self.lam}")
        if self.variant == "power" and not self.alpha > 1:
            raise ValueError(f"power scheme needs alpha > 1, got {self.alpha}")
        if self.variant == "linear_negative" and not self.floor < 0:
            raise ValueError(f"linear_negative needs a negative floor, got {self.floor}")

    @property
    def clip_level(self) -> float:
        """Weight assigned below the active region (f'(0) in KKT terms)."""
        if self.variant == "exp":
            return -np.inf
        if self.variant == "linear_negative":
            return self.floor
        return 0.0

    @property
    def is_signed(self) -> bool:
        return self.variant in ("linear_negative", "wd1")

    def g(self, x):
        """Pointwise weight map applied to standardized advantages."""
        x = np.asarray(x, dtype=float)
        v = self.variant
        if v == "exp":
            with np.errstate(over="ignore"):
                return np.exp(x)
        if v == "linear":
            return np.maximum(x, 0.0)
        if v == "square":
            return np.maximum(x, 0.0) ** 2
        if v == "power":
            return np.maximum(x, 0.0) ** (1.0 / (self.alpha - 1.0))
        if v == "linear_negative":
            return np.maximum(x, self.floor)
        raise DomainError("wd1 weights depend on the whole batch, not a pointwise map")

    def with_lam(self, lam: float) -> "WeightingScheme":
        return WeightingScheme(self.variant, lam, self.floor, self.alpha)


@dataclass(frozen=True)
class WeightVector:
    values: np.ndarray
    tag: str = UNNORMALIZED

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(vals)):
            bad = int(np.flatnonzero(~np.isfinite(vals))[0])
            raise NonFiniteError(f"weight {bad} is not finite", index=bad)
        if self.tag == MEAN_ONE and abs(vals.mean() - 1.0) > 1e-8:
            raise ValueError(f"mean-one weights have mean {vals.mean()!r}")
        if self.tag == SUM_ZERO and abs(vals.sum()) > 1e-10:
            raise ValueError(f"sum-zero weights have sum {vals.sum()!r}")
        if self.tag not in (MEAN_ONE, SUM_ZERO, UNNORMALIZED):
            raise ValueError(f"unknown normalization tag {self.tag!r}")
        object.__setattr__(self, "values", vals)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __len__(self):
        return self.values.size


def as_values(q, min_size=1):
    q = np.asarray(q, dtype=float)
    if q.ndim == 2 and q.shape[1] == 1:
        q = q[:, 0]
    if q.ndim != 1:
        raise DomainError(f"values must be a vector, got shape {q.shape}")
    if q.size < min_size:
        raise DomainError(f"need at least {min_size} values, got {q.size}")
    if not np.all(np.isfinite(q)):
        raise DomainError("values must be finite")
    return q


def evaluate_weights(scheme: WeightingScheme, q, nu: float = 0.0, tag: str = UNNORMALIZED) -> WeightVector:
    """Map values to weights for a given normalizer ``nu``.

    ``wd1`` ignores ``nu`` and ``lam``: its weights come from group-relative
    advantages and always sum to zero.
    """
    q = as_values(q)
    if scheme.variant == "wd1":
        return wd1_weights(group_relative_advantage(q))
    w = scheme.g((q - nu) / scheme.lam)
    if not np.all(np.isfinite(w)):
        bad = int(np.flatnonzero(~np.isfinite(w))[0])
        raise NonFiniteError(f"weight for sample {bad} overflowed (q={q[bad]!r}, nu={nu!r})", index=bad)
    return WeightVector(w, tag)


def group_relative_advantage(rewards):
    r = as_values(rewards, min_size=2)
    return (r - r.mean()) / max(r.std(), STD_FLOOR)


def wd1_weights(advantages) -> WeightVector:
    a = as_values(advantages)
    w = softmax(a) - softmax(-a)
    # remove rounding drift so the sum-zero tag holds to ~1e-16
    w = w - w.mean()
    return WeightVector(w, SUM_ZERO)


def _generator(name, alpha):
    if name == "kl":
        return lambda r: xlogy(r, r)
    if name in ("chi2", "chisquare"):
        return lambda r: r * r - 1.0
    if name == "alpha":
        if alpha is None or not alpha > 1:
            raise DomainError("alpha divergence needs alpha > 1")
        if float(alpha).is_integer():
            return lambda r: (r ** int(alpha) - r) / (alpha * (alpha - 1.0))
        return lambda r: (r ** alpha - r) / (alpha * (alpha - 1.0))
    raise DomainError(f"unknown generator {name!r}")


def f_divergence_value(generator: str, p, q, alpha: float | None = None) -> float:
    """sum_i q_i f(p_i / q_i) for a (possibly signed) ``p`` against positive ``q``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape or p.ndim != 1:
        raise DomainError(f"p and q must be aligned vectors, got {p.shape} and {q.shape}")
    if np.any(q <= 0):
        raise DomainError("reference masses must be strictly positive")
    if abs(q.sum() - 1.0) > 1e-10 or abs(p.sum() - 1.0) > 1e-10:
        raise DomainError("both measures must have total mass one")
    generator = generator.lower()
    if np.any(p < 0):
        if generator == "kl":
            raise DomainError("KL generator is undefined for negative masses")
        if generator == "alpha" and not float(alpha).is_integer():
            raise DomainError("non-integer alpha power is undefined for negative masses")
    f = _generator(generator, alpha)
    return float(np.sum(q * f(p / q)))


@dataclass(frozen=True)
class SampleBatch:
    """One state's sampled actions ``(N, d)`` with their values ``(N,)``."""

    actions: np.ndarray
    values: np.ndarray
    context: np.ndarray | None = None

    def __post_init__(self):
        a = np.asarray(self.actions, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        q = as_values(self.values, min_size=2)
        if a.ndim != 2 or a.shape[0] != q.size:
            raise DomainError(f"{a.shape[0]} actions but {q.size} values")
        if not np.all(np.isfinite(a)):
            raise DomainError("actions must be finite")
        object.__setattr__(self, "actions", a)
        object.__setattr__(self, "values", q)
        if self.context is not None:
            object.__setattr__(self, "context", np.asarray(self.context, dtype=float))

    def __len__(self):
        return self.values.size
