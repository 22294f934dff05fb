"""One-dimensional continuous bandits and the two-stage training loop.

Each epoch samples a batch from the current flow policy, scores it with the
(shaped) reward, builds target-measure weights and then runs weighted flow
matching steps with those weights held fixed. With a single state, the value
of an action is simply its shaped reward.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import entr

from .exceptions import SimpoError
from .flow import ReweightedFlowMatcher, sample_actions
from .normalizer import normalized_weights
from .numkit import RngStream
from .oracle import DiscreteMeasure, improvement_gap
from .temperature import TemperatureTuner, lambda_step, weight_entropy
from .weighting import SCHEMES, WeightingScheme

__all__ = [
    "RewardLandscape",
    "LANDSCAPES",
    "ShapingTransform",
    "SHAPINGS",
    "TrainConfig",
    "MetricsRecord",
    "TrialState",
    "TrialResult",
    "reward",
    "shape_reward",
    "action_grid",
    "regret",
    "init_trial",
    "train_epoch",
    "run_trial",
    "run_experiment",
]

ACTION_LOW, ACTION_HIGH = -1.0, 1.0
GRID_SIZE = 2001


@dataclass(frozen=True)
class RewardLandscape:
    """Sum of Gaussian bumps on [-1, 1] plus the Gaussian the policy starts from."""

    name: str
    centers: tuple
    heights: tuple
    widths: tuple
    init_mean: float = 0.0
    init_std: float = 0.2

    def __post_init__(self):
        if not (len(self.centers) == len(self.heights) == len(self.widths) >= 1):
            raise ValueError("need at least one bump with matching center/height/width")
        if any(s <= 0 for s in self.widths) or any(h <= 0 for h in self.heights):
            raise ValueError("bump heights and widths must be positive")

    @property
    def r_max(self) -> float:
        return float(np.max(reward(self, action_grid())))

    @property
    def global_index(self) -> int:
        return int(np.argmax(self.heights))


_MU = (-0.5, 0.5)
_H = (0.8, 1.0)
LANDSCAPES = {
    "two_broad": RewardLandscape("two_broad", _MU, _H, (0.25, 0.25), init_mean=0.0, init_std=0.2),
    "two_sharp": RewardLandscape("two_sharp", _MU, _H, (0.05, 0.05), init_mean=0.0, init_std=0.2),
    "subopt_init": RewardLandscape("subopt_init", _MU, _H, (0.25, 0.25), init_mean=-0.5, init_std=0.25),
}


@dataclass(frozen=True)
class ShapingTransform:
    """Monotone map of the normalized score u = R/R_max from [0, 1] onto [0, 1]."""

    variant: str = "linear"
    kappa: float = 4.0

    def __post_init__(self):
        if self.variant not in SHAPINGS:
            raise ValueError(f"unknown shaping {self.variant!r}; expected one of {SHAPINGS}")

    def __call__(self, u):
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        if self.variant == "sqrt":
            return np.sqrt(u)
        if self.variant == "linear":
            return u
        if self.variant == "square":
            return u * u
        return np.expm1(self.kappa * u) / math.expm1(self.kappa)


SHAPINGS = ("sqrt", "linear", "square", "exp")


def action_grid(n=GRID_SIZE):
    return np.linspace(ACTION_LOW, ACTION_HIGH, n)


def reward(landscape: RewardLandscape, a):
    a = np.clip(np.asarray(a, dtype=float), ACTION_LOW, ACTION_HIGH)
    out = np.zeros_like(a)
    for mu, h, s in zip(landscape.centers, landscape.heights, landscape.widths):
        out = out + h * np.exp(-((a - mu) ** 2) / (2.0 * s * s))
    return out


def shape_reward(transform: ShapingTransform, landscape: RewardLandscape, a, r_max=None):
    r_max = landscape.r_max if r_max is None else r_max
    return transform(reward(landscape, a) / r_max)


@dataclass(frozen=True)
class TrainConfig:
    scheme: str = "exp"
    lam: float = 1.0
    floor: float = -0.05
    alpha: float = 1.5
    epsilon: float = 1.5
    tune_lambda: bool = True
    n_samples: int = 32
    epochs: int = 200
    grad_steps: int = 20
    sampler_steps: int = 20
    schedule: str = "linear"
    landscape: str = "two_broad"
    shaping: str = "linear"
    hidden_layers: int = 2
    hidden_width: int = 64
    lr: float = 1e-3
    seed: int = 0
    n_eval: int = 256
    dual_lr: float = 1e-2
    dual_steps: int = 1
    lam_min: float = 1e-3
    noise_draws: int = 4
    warmstart_steps: int = 500

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.landscape not in LANDSCAPES:
            raise ValueError(f"unknown landscape {self.landscape!r}; expected one of {tuple(LANDSCAPES)}")
        for name in ("n_samples", "sampler_steps", "hidden_width", "n_eval", "noise_draws", "dual_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        for name in ("epochs", "grad_steps", "hidden_layers", "warmstart_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.n_samples < 2:
            raise ValueError("n_samples must be at least 2")
        if not self.lam > 0 or not self.lr > 0:
            raise ValueError("lambda and lr must be positive")
        ShapingTransform(self.shaping)
        WeightingScheme(self.scheme, self.lam, self.floor, self.alpha)
        if self.tune_lambda and self.scheme == "exp":
            TemperatureTuner(self.lam, self.epsilon, self.dual_lr, self.lam_min, self.n_samples)

    @property
    def weighting(self) -> WeightingScheme:
        return WeightingScheme(self.scheme, self.lam, self.floor, self.alpha)

    @property
    def tunes(self) -> bool:
        # the dual is derived for the exponential rule only
        return self.tune_lambda and self.scheme == "exp"

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    regret: float
    mean_weight: float
    min_weight: float
    max_weight: float
    nu: float
    lam: float
    weight_entropy: float
    wall_ms: float
    improvement_gap: float = 0.0


@dataclass
class TrialState:
    policy: ReweightedFlowMatcher
    lam: float
    tuner: Optional[TemperatureTuner]
    sample_rng: RngStream
    eval_rng: RngStream
    epoch: int = 0


@dataclass
class TrialResult:
    seed: int
    initial_regret: float
    records: list = field(default_factory=list)
    state: Optional[TrialState] = None

    @property
    def final_regret(self) -> float:
        return self.records[-1].regret if self.records else self.initial_regret


def regret(policy, landscape: RewardLandscape, shaping: ShapingTransform, n_eval: int, rng: RngStream,
           r_max=None) -> float:
    """Grid maximum of the shaped reward minus its Monte Carlo mean under the policy.

    ``policy`` is a fitted :class:`ReweightedFlowMatcher` or any callable
    ``(n, rng) -> actions``.
    """
    if n_eval < 1:
        raise ValueError("n_eval must be at least 1")
    r_max = landscape.r_max if r_max is None else r_max
    best = float(np.max(shape_reward(shaping, landscape, action_grid(), r_max)))
    acts = _draw(policy, n_eval, rng)
    return best - float(np.mean(shape_reward(shaping, landscape, acts, r_max)))


def _draw(policy, n, rng):
    if isinstance(policy, ReweightedFlowMatcher):
        a = sample_actions(policy.policy_, None, n, rng)[:, 0]
    else:
        a = np.asarray(policy(n, rng), dtype=float).ravel()
    return np.clip(a, ACTION_LOW, ACTION_HIGH)


def _entropy_of(w):
    mass = np.abs(w)
    total = mass.sum()
    return float(np.sum(entr(mass / total))) if total > 0 else 0.0


def init_trial(config: TrainConfig, trial_seed: int) -> TrialState:
    """Build the policy and warm-start it on the landscape's initial Gaussian."""
    land = LANDSCAPES[config.landscape]
    root = RngStream(trial_seed)
    policy = ReweightedFlowMatcher(
        hidden_layers=config.hidden_layers, hidden_width=config.hidden_width, schedule=config.schedule,
        sampler_steps=config.sampler_steps, lr=config.lr, max_iter=config.warmstart_steps,
        noise_draws=1, warm_start=True, random_state=trial_seed,
    )
    init = land.init_mean + land.init_std * root.substream(10).normal((256, 1))
    init = np.clip(init, ACTION_LOW, ACTION_HIGH)
    policy.fit(init)
    policy.set_params(max_iter=config.grad_steps, noise_draws=config.noise_draws)
    tuner = None
    if config.tunes:
        tuner = TemperatureTuner(config.lam, config.epsilon, config.dual_lr, config.lam_min, config.n_samples)
    return TrialState(policy, config.lam, tuner, root.substream(20), root.substream(30))


def train_epoch(state: TrialState, config: TrainConfig, r_max=None):
    """Stage I on a fresh batch, then Stage II with frozen weights.

    Returns ``(state, MetricsRecord)``; ``state`` is updated in place.
    """
    start = time.perf_counter()
    land = LANDSCAPES[config.landscape]
    shaping = ShapingTransform(config.shaping)
    r_max = land.r_max if r_max is None else r_max
    epoch = state.epoch + 1
    try:
        acts = _draw(state.policy, config.n_samples, state.sample_rng)
        q = shape_reward(shaping, land, acts, r_max)
        scheme = config.weighting.with_lam(state.lam)
        weights, res = normalized_weights(scheme, q)
        w = weights.values
        nu = res.nu if res is not None else float("nan")
        gap, _ = improvement_gap(DiscreteMeasure.uniform(np.arange(acts.size)), q, scheme)
        entropy = weight_entropy(q, state.lam) if config.scheme == "exp" else _entropy_of(w)
        if config.grad_steps > 0:
            state.policy.fit(acts[:, None], sample_weight=w)
        lam_used = state.lam
        if state.tuner is not None:
            for _ in range(config.dual_steps):
                state.tuner = lambda_step(state.tuner, q)
            state.lam = state.tuner.lam
        reg = regret(state.policy, land, shaping, config.n_eval, state.eval_rng, r_max)
    except SimpoError as exc:
        raise type(exc)(f"epoch {epoch}: {exc}") from exc
    state.epoch = epoch
    wall = (time.perf_counter() - start) * 1e3
    rec = MetricsRecord(epoch, reg, float(w.mean()), float(w.min()), float(w.max()), float(nu),
                        float(lam_used), entropy, wall, float(gap))
    return state, rec


def run_trial(config: TrainConfig, trial_seed: int, keep_state=True) -> TrialResult:
    land = LANDSCAPES[config.landscape]
    r_max = land.r_max
    state = init_trial(config, trial_seed)
    shaping = ShapingTransform(config.shaping)
    init_reg = regret(state.policy, land, shaping, config.n_eval, RngStream(trial_seed, (40,)), r_max)
    result = TrialResult(trial_seed, init_reg)
    for _ in range(config.epochs):
        state, rec = train_epoch(state, config, r_max)
        result.records.append(rec)
    if keep_state:
        result.state = state
    return result


def run_experiment(config: TrainConfig, seeds=None, n_seeds: int = 1, workers: int = 1):
    """Run independent trials; seeds default to ``config.seed + i``."""
    if seeds is None:
        seeds = [config.seed + i for i in range(n_seeds)]
    seeds = list(seeds)
    if workers <= 1 or len(seeds) <= 1:
        return [run_trial(config, s) for s in seeds]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: run_trial(config, s), seeds))


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)
