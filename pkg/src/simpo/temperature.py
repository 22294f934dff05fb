"""Dual-descent temperature tuning for exponential weights.

The dual loss lam*eps + lam*logsumexp(q/lam) - lam*log(N) has derivative
eps + H(softmax(q/lam)) - log(N), so descent drives the entropy of the
reweighting distribution towards log(N) - eps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp, softmax, entr

from .weighting import as_values

__all__ = ["TemperatureTuner", "dual_loss", "dual_gradient", "weight_entropy", "lambda_step"]


def weight_entropy(q, lam: float) -> float:
    """Shannon entropy (nats) of softmax(q / lam)."""
    q = as_values(q)
    return float(np.sum(entr(softmax(q / lam))))


def dual_loss(lam: float, q, eps: float) -> float:
    q = as_values(q)
    return float(lam * eps + lam * logsumexp(q / lam) - lam * math.log(q.size))


def dual_gradient(lam: float, q, eps: float) -> float:
    q = as_values(q)
    return eps + weight_entropy(q, lam) - math.log(q.size)


@dataclass(frozen=True)
class TemperatureTuner:
    lam: float = 1.0
    eps: float = 1.5
    step_size: float = 1e-2
    lam_min: float = 1e-3
    n_samples: int = 32

    def __post_init__(self):
        if not self.lam_min > 0:
            raise ValueError("lam_min must be positive")
        if self.lam < self.lam_min:
            raise ValueError(f"lam {self.lam} is below lam_min {self.lam_min}")
        if not 0 < self.eps < math.log(self.n_samples):
            raise ValueError(f"KL budget {self.eps} must lie in (0, log N = {math.log(self.n_samples):.4f})")

    @property
    def target_entropy(self) -> float:
        return math.log(self.n_samples) - self.eps


def lambda_step(tuner: TemperatureTuner, q) -> TemperatureTuner:
    g = dual_gradient(tuner.lam, q, tuner.eps)
    return replace(tuner, lam=max(tuner.lam - tuner.step_size * g, tuner.lam_min))
