"""Self-check suite behind ``simpo verify``.

Every check compares library output against an independent oracle and
reports the worst residual seen. Nothing touches the network and the only
file written is a checkpoint inside a temporary directory.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import softmax

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .flow import NoiseSchedule, make_policy, weighted_cfm_grad, weighted_cfm_loss
from .normalizer import (
    kkt_residual,
    normalized_weights,
    solve_nu,
    solve_nu_bisection,
    solve_nu_floor,
    solve_nu_linear,
    solve_nu_square,
)
from .numkit import RngStream, adam_init, adam_step, finite_diff_grad, init_mlp, mlp_backward, mlp_forward
from .oracle import (
    DiscreteMeasure,
    LocalQuadratic,
    MixturePath,
    continuity_residual,
    improvement_gap,
    path_mass,
    posterior_weights,
    repelling_divergence,
    ve_score_residual,
    weighted_marginal_velocity,
)
from .temperature import dual_gradient, dual_loss
from .weighting import WeightingScheme, group_relative_advantage, wd1_weights

__all__ = ["CheckResult", "CHECKS", "run_checks"]

SCHEME_GRID = [
    WeightingScheme("exp", 1.0),
    WeightingScheme("linear", 1.0),
    WeightingScheme("square", 1.0),
    WeightingScheme("power", 1.0, alpha=1.5),
    WeightingScheme("power", 1.0, alpha=3.0),
    WeightingScheme("linear_negative", 1.0, floor=-0.05),
    WeightingScheme("wd1", 1.0),
]


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    residual: float
    tolerance: float
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"[{status}] {self.name:<22} residual={self.residual:.3e} tol={self.tolerance:.1e}{extra}"


def _batch(rng, n_lo=2, n_hi=64):
    n = int(rng.integers(n_lo, n_hi + 1))
    s = float(np.exp(rng.uniform(np.log(0.1), np.log(10.0))))
    lam = float(rng.uniform(0.1, 5.0))
    return s * rng.normal(n), lam


def _bisect_nu(scheme, q):
    g = lambda nu: scheme.g((q - nu) / scheme.lam)
    span = (q.max() - q.min()) + scheme.lam * (1.0 + abs(scheme.floor)) * q.size + 1.0
    return solve_nu_bisection(g, 1.0, (q.min() - span, q.max()), tol=1e-10)


def check_normalizer(n_batches=1000, seed=0):
    rng = RngStream(seed, (1,))
    worst_nu, worst_mean = 0.0, 0.0
    for _ in range(n_batches):
        q, lam = _batch(rng)
        for variant, solver in (("linear", solve_nu_linear), ("square", solve_nu_square)):
            res = solver(q, lam)
            ref = _bisect_nu(WeightingScheme(variant, lam), q)
            worst_nu = max(worst_nu, abs(res.nu - ref))
            worst_mean = max(worst_mean, res.residual)
        res = solve_nu(WeightingScheme("exp", lam), q)
        worst_nu = max(worst_nu, abs(res.nu - _bisect_nu(WeightingScheme("exp", lam), q)))
        worst_mean = max(worst_mean, res.residual)
    ok = worst_nu <= 1e-9 and worst_mean <= 1e-8
    return CheckResult("normalizer_exactness", ok, worst_nu, 1e-9, f"mean error {worst_mean:.1e}")


def check_anchors():
    cases = [
        (solve_nu_linear([3.0, 1.0], 1.0).nu, 1.0),
        (solve_nu_square([3.0, 1.0], 1.0).nu, 3.0 - math.sqrt(2.0)),
        (solve_nu_square([2.0, 2.0, 0.0], 1.0).nu, (4.0 - math.sqrt(6.0)) / 2.0),
        (solve_nu_floor([10.0, 0.0], 1.0, -0.05).nu, 7.95),
    ]
    worst = max(abs(a - b) for a, b in cases)
    return CheckResult("solver_anchors", worst <= 1e-9, worst, 1e-9, f"{len(cases)} anchors")


def check_kkt(n_batches=200, seed=0, perturb_nu=0.0):
    """KKT residual of the solved weights; ``perturb_nu`` shifts every nu
    before evaluation and must make the check fail."""
    rng = RngStream(seed, (2,))
    worst = 0.0
    for _ in range(n_batches):
        q, lam = _batch(rng)
        for scheme in SCHEME_GRID[:-1]:
            scheme = scheme.with_lam(lam)
            nu = solve_nu(scheme, q).nu + perturb_nu
            worst = max(worst, kkt_residual(scheme, q, nu=nu))
    return CheckResult("kkt_residual", worst <= 1e-8, worst, 1e-8,
                       "perturbed nu" if perturb_nu else "")


def check_improvement(n_instances=1000, seed=0):
    rng = RngStream(seed, (3,))
    worst_neg, worst_cov = 0.0, 0.0
    for _ in range(n_instances):
        n = int(rng.integers(2, 33))
        m = rng.uniform(0.05, 1.0, n)
        base = DiscreteMeasure(np.arange(n, dtype=float), m / m.sum())
        q = float(rng.uniform(0.1, 3.0)) * rng.normal(n)
        lam = float(rng.uniform(0.2, 5.0))
        for scheme in SCHEME_GRID:
            gap, cov = improvement_gap(base, q, scheme.with_lam(lam))
            worst_neg = max(worst_neg, -gap)
            worst_cov = max(worst_cov, abs(gap - cov))
    ok = worst_neg <= 1e-12 and worst_cov <= 1e-10
    return CheckResult("improvement_gap", ok, worst_cov, 1e-10, f"most negative gap {-worst_neg:.1e}")


def _rel(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def check_gradients(seed=0):
    rng = RngStream(seed, (4,))
    net = init_mlp([3, 8, 8, 2], rng.substream(0))
    x = rng.normal((5, 3))
    up = rng.normal((5, 2))
    grads, gx = mlp_backward(net, x, up)
    theta = net.flat_params()
    f = lambda th: float(np.sum(up * mlp_forward(net.with_flat_params(th), x)))
    err_mlp = _rel(np.concatenate([g.ravel() for g in grads]), finite_diff_grad(f, theta, 1e-6))
    err_in = _rel(gx, finite_diff_grad(lambda z: float(np.sum(up * mlp_forward(net, z.reshape(5, 3)))),
                                      x.ravel(), 1e-6))

    pol = make_policy(rng.substream(1), 1, 0, 2, 8)
    acts = rng.normal((6, 1))
    w = np.array([2.0, 1.5, 1.0, 0.8, -0.05, -0.25])
    t = rng.uniform(0.05, 0.95, 6)
    eps = rng.normal((6, 1))
    g = np.concatenate([a.ravel() for a in weighted_cfm_grad(pol, acts, w, t, eps)])
    loss = lambda th: weighted_cfm_loss(pol.with_net(pol.net.with_flat_params(th)), acts, w, t, eps)
    err_cfm = _rel(g, finite_diff_grad(loss, pol.net.flat_params(), 1e-6))

    worst_dual, bounds_ok = 0.0, True
    for _ in range(50):
        q = float(rng.uniform(0.1, 3.0)) * rng.normal(int(rng.integers(2, 64)))
        lam, eps_kl = float(rng.uniform(0.1, 5.0)), float(rng.uniform(0.1, 2.0))
        gd = dual_gradient(lam, q, eps_kl)
        fd = finite_diff_grad(lambda l: dual_loss(l, q, eps_kl), lam, 1e-6)
        worst_dual = max(worst_dual, abs(gd - fd))
        bounds_ok &= eps_kl - math.log(q.size) <= gd <= eps_kl
    worst_rel = max(err_mlp, err_in, err_cfm)
    ok = worst_rel <= 1e-4 and worst_dual <= 1e-6 and bounds_ok
    return CheckResult("gradient_fidelity", ok, worst_rel, 1e-4,
                       f"dual abs {worst_dual:.1e}, bounds {'ok' if bounds_ok else 'VIOLATED'}")


def _demo_path(schedule="linear", weights=(1.4, -0.2, 0.8)):
    base = DiscreteMeasure(np.array([-0.6, 0.1, 0.7]), np.array([0.3, 0.3, 0.4]))
    return MixturePath(base, np.asarray(weights), NoiseSchedule(schedule))


def check_flow_identities():
    # unit weights: v(x) = (x - E[x0 | x_t]) / t under the linear schedule
    path = _demo_path(weights=(1.0, 1.0, 1.0))
    xs = np.linspace(-2.0, 2.0, 41)
    worst_red = 0.0
    for t in (0.1, 0.5, 0.9):
        ref = (xs - posterior_weights(path, xs, t) @ path.base.points) / t
        worst_red = max(worst_red, float(np.max(np.abs(weighted_marginal_velocity(path, xs, t) - ref))))
    ve = _demo_path("ve", (1.0, 1.0, 1.0))
    worst_ve = max(float(np.max(ve_score_residual(ve, xs, t))) for t in (0.05, 0.3, 1.0))
    signed = _demo_path()
    xs_c = np.linspace(-1.5, 1.5, 13)
    r1 = float(np.max(np.abs(continuity_residual(signed, xs_c, 0.5, 1e-3))))
    r2 = float(np.max(np.abs(continuity_residual(signed, xs_c, 0.5, 5e-4))))
    ratio = r1 / r2
    mass = abs(path_mass(signed, 0.5, -8.0, 8.0) - 1.0)
    ok = worst_red <= 1e-12 and worst_ve <= 1e-10 and r1 <= 1e-3 and 3.0 <= ratio <= 5.0 and mass <= 1e-6
    return CheckResult("flow_identities", ok, max(worst_red, worst_ve), 1e-10,
                       f"continuity {r1:.1e} ratio {ratio:.2f} mass {mass:.1e}")


def check_repelling():
    d = repelling_divergence(LocalQuadratic(-1.0, np.zeros(1)), np.array([0.1]), 0.1, 10)
    err = abs(d[-1] - 0.1 * 1.2 ** 10)
    ok = err <= 1e-9 and bool(np.all(np.diff(d) > 0))
    return CheckResult("repelling", ok, err, 1e-9, f"final distance {d[-1]:.4f}")


def check_weight_invariants(n_batches=200, seed=0):
    rng = RngStream(seed, (5,))
    worst = 0.0
    for _ in range(n_batches):
        q, lam = _batch(rng)
        w, _ = normalized_weights(WeightingScheme("exp", lam), q)
        worst = max(worst, float(np.max(np.abs(w.values - q.size * softmax(q / lam)))))
        wn, _ = normalized_weights(WeightingScheme("linear_negative", lam, floor=-0.05), q)
        worst = max(worst, max(0.0, -0.05 - float(wn.values.min())))
        worst = max(worst, abs(float(wd1_weights(group_relative_advantage(q)).values.sum())))
    return CheckResult("weight_invariants", worst <= 1e-10, worst, 1e-10)


def check_checkpoint(seed=0):
    rng = RngStream(seed, (6,))
    net = init_mlp([6, 16, 16, 1], rng)
    state = adam_init(net.params(), lr=1e-3)
    params, state = adam_step(state, net.params(), [rng.normal(p.shape) for p in net.params()])
    net = net.with_params(params)
    ckpt = Checkpoint(net, state, epoch=7, lam=0.1 + 1e-17 * 3)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "ckpt.json"
        save_checkpoint(ckpt, path)
        back = load_checkpoint(path)
    same = all(np.array_equal(a, b) for a, b in zip(net.params(), back.net.params()))
    same &= all(np.array_equal(a, b) for a, b in zip(state.m + state.v, back.optimizer.m + back.optimizer.v))
    same &= back.epoch == 7 and back.lam == ckpt.lam and back.optimizer.step == state.step
    return CheckResult("checkpoint_roundtrip", bool(same), 0.0 if same else 1.0, 0.0)


CHECKS = {
    "normalizer_exactness": check_normalizer,
    "solver_anchors": check_anchors,
    "kkt_residual": check_kkt,
    "improvement_gap": check_improvement,
    "gradient_fidelity": check_gradients,
    "flow_identities": check_flow_identities,
    "repelling": check_repelling,
    "weight_invariants": check_weight_invariants,
    "checkpoint_roundtrip": check_checkpoint,
}


def run_checks(perturb_nu=0.0, out=None):
    """Run every check; returns the list of results and prints one line each
    to ``out`` when given."""
    results = []
    for name, fn in CHECKS.items():
        start = time.perf_counter()
        res = fn(perturb_nu=perturb_nu) if name == "kkt_residual" else fn()
        results.append(res)
        if out is not None:
            print(f"{res.line()}  [{time.perf_counter() - start:.2f}s]", file=out)
    return results
