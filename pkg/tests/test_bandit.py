import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from simpo.bandit import (
    LANDSCAPES,
    SHAPINGS,
    RewardLandscape,
    ShapingTransform,
    TrainConfig,
    action_grid,
    init_trial,
    regret,
    reward,
    run_experiment,
    run_trial,
    shape_reward,
    train_epoch,
    with_overrides,
)
from simpo.numkit import RngStream

SMALL = dict(epochs=3, grad_steps=3, warmstart_steps=20, hidden_width=8, n_eval=32, sampler_steps=5)


def test_reward_examples():
    assert reward(LANDSCAPES["two_broad"], 0.5) == pytest.approx(1.0 + 0.8 * math.exp(-8), abs=1e-15)
    assert reward(LANDSCAPES["two_sharp"], 0.0) <= 1e-10
    one = RewardLandscape("one", (0.2,), (3.0,), (0.1,))
    assert reward(one, 0.2) == 3.0
    # out-of-range actions clamp to the boundary
    assert reward(one, 5.0) == reward(one, 1.0)


def test_landscape_presets():
    for land in LANDSCAPES.values():
        assert land.centers == (-0.5, 0.5) and land.heights == (0.8, 1.0)
        assert land.centers[land.global_index] == 0.5
    assert LANDSCAPES["two_broad"].widths == (0.25, 0.25)
    assert LANDSCAPES["two_sharp"].widths == (0.05, 0.05)
    assert LANDSCAPES["subopt_init"].init_mean == -0.5
    with pytest.raises(ValueError):
        RewardLandscape("bad", (0.0,), (1.0,), (0.0,))


@pytest.mark.parametrize("variant", SHAPINGS)
def test_shapings_fix_the_endpoints(variant):
    s = ShapingTransform(variant)
    assert s(1.0) == pytest.approx(1.0, abs=1e-15) and s(0.0) == 0.0


def test_shaping_values():
    assert ShapingTransform("square")(0.5) == 0.25
    assert ShapingTransform("sqrt")(0.5) == pytest.approx(math.sqrt(0.5))
    assert ShapingTransform("exp")(0.5) == pytest.approx(math.expm1(2) / math.expm1(4))
    with pytest.raises(ValueError):
        ShapingTransform("cubic")


@pytest.mark.parametrize("variant", SHAPINGS)
@given(a=st.floats(0, 1), b=st.floats(0, 1))
def test_shapings_are_monotone(variant, a, b):
    s = ShapingTransform(variant)
    lo, hi = sorted((a, b))
    assert s(lo) <= s(hi)


def test_shaped_reward_peaks_at_one():
    land = LANDSCAPES["two_sharp"]
    r = shape_reward(ShapingTransform("linear"), land, action_grid())
    assert r.max() == 1.0 and r.min() >= 0.0


def test_regret_of_point_policy_at_optimum():
    land = LANDSCAPES["two_broad"]
    grid = action_grid()
    best = grid[np.argmax(reward(land, grid))]
    r = regret(lambda n, rng: np.full(n, best), land, ShapingTransform("linear"), 10, RngStream(0))
    assert r == pytest.approx(0.0, abs=1e-15)


def test_regret_of_uniform_policy_matches_quadrature():
    land = LANDSCAPES["two_broad"]
    grid = np.linspace(-1, 1, 200001)
    u = reward(land, grid) / land.r_max
    expected = 1.0 - np.trapezoid(u, grid) / 2.0
    uniform = lambda n, rng: rng.uniform(-1.0, 1.0, size=n)
    r = regret(uniform, land, ShapingTransform("linear"), 400000, RngStream(1))
    assert r == pytest.approx(expected, abs=5e-3)
    with pytest.raises(ValueError):
        regret(uniform, land, ShapingTransform("linear"), 0, RngStream(1))


def test_config_validation():
    for bad in (dict(scheme="nope"), dict(landscape="flat"), dict(n_samples=1), dict(epochs=-1),
                dict(lam=0.0), dict(shaping="cubic"), dict(epsilon=5.0), dict(scheme="linear_negative", floor=2.0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    assert TrainConfig(scheme="linear", epsilon=5.0).tunes is False


def test_flat_rewards_give_unit_weights(monkeypatch):
    monkeypatch.setitem(LANDSCAPES, "flat", RewardLandscape("flat", (0.0,), (1.0,), (1e9,)))
    cfg = TrainConfig(landscape="flat", tune_lambda=False, **SMALL)
    state = init_trial(cfg, 0)
    _, rec = train_epoch(state, cfg)
    assert abs(rec.min_weight - 1.0) <= 1e-10 and abs(rec.max_weight - 1.0) <= 1e-10


@pytest.mark.parametrize("scheme", ["exp", "linear", "square", "power", "linear_negative", "wd1"])
def test_epoch_weights_and_gap(scheme):
    cfg = TrainConfig(scheme=scheme, lam=0.3, **SMALL)
    res = run_trial(cfg, 3)
    for rec in res.records:
        assert rec.improvement_gap >= -1e-12
        if scheme == "wd1":
            assert abs(rec.mean_weight) <= 1e-12
        else:
            assert abs(rec.mean_weight - 1.0) <= 1e-8
        lower = {"linear_negative": -0.05, "wd1": -1.0}.get(scheme, 0.0)
        assert rec.min_weight >= lower - 1e-15
        assert rec.regret <= 1.0


def test_trials_are_deterministic():
    cfg = TrainConfig(**SMALL)
    a = run_trial(cfg, 7)
    b = run_trial(cfg, 7)
    strip = lambda r: [(x.epoch, x.regret, x.nu, x.lam, x.mean_weight, x.improvement_gap) for x in r.records]
    assert strip(a) == strip(b)
    assert strip(a) != strip(run_trial(cfg, 8))


def test_zero_epochs_is_empty():
    res = run_trial(TrainConfig(**{**SMALL, "epochs": 0}), 0)
    assert res.records == [] and res.final_regret == res.initial_regret
    assert res.state is not None


def test_tuner_moves_lambda():
    res = run_trial(TrainConfig(scheme="exp", tune_lambda=True, **SMALL), 0)
    lams = [r.lam for r in res.records]
    assert lams[0] == 1.0 and lams[-1] != lams[0]
    fixed = run_trial(TrainConfig(scheme="exp", tune_lambda=False, **SMALL), 0)
    assert all(r.lam == 1.0 for r in fixed.records)


def test_suboptimal_init_concentrates_on_the_small_bump():
    cfg = TrainConfig(landscape="subopt_init")
    land = LANDSCAPES["subopt_init"]
    state = init_trial(cfg, 0)
    acts = state.policy.sample(512, rng=RngStream(0, (99,)))[:, 0]
    mu, s = land.centers[0], land.widths[0]
    assert np.mean(np.abs(acts - mu) <= 2 * s) >= 0.9


def test_training_reduces_regret_on_broad_optima():
    cfg = TrainConfig(scheme="square", lam=0.1, tune_lambda=False, epochs=30)
    res = run_experiment(cfg, n_seeds=3)
    assert np.median([r.final_regret for r in res]) < np.median([r.initial_regret for r in res])


def test_overrides_and_parallel_runs_agree():
    cfg = with_overrides(TrainConfig(**SMALL), scheme="linear", lam=0.5)
    assert cfg.scheme == "linear" and cfg.lam == 0.5
    serial = run_experiment(cfg, seeds=[1, 2])
    threaded = run_experiment(cfg, seeds=[1, 2], workers=2)
    assert [r.final_regret for r in serial] == [r.final_regret for r in threaded]
