"""Small deterministic numerics: Mish MLP with analytic backprop, Adam, finite
differences and counter-based random streams.

Everything runs in float64 on numpy arrays. Networks act on a single input
vector ``(d,)`` or a batch ``(n, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .exceptions import NonFiniteError, ShapeError

__all__ = [
    "softplus",
    "mish",
    "mish_grad",
    "Mlp",
    "init_mlp",
    "mlp_forward",
    "mlp_backward",
    "AdamState",
    "adam_init",
    "adam_step",
    "finite_diff_grad",
    "RngStream",
    "rng_stream",
]


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def mish(x):
    """x * tanh(softplus(x)), overflow-safe for large |x|."""
    x = np.asarray(x, dtype=float)
    out = x * np.tanh(softplus(x))
    return float(out) if out.ndim == 0 else out


def mish_grad(x):
    x = np.asarray(x, dtype=float)
    tsp = np.tanh(softplus(x))
    return tsp + x * (1.0 - tsp * tsp) * _sigmoid(x)


def _mish_fused(x):
    # tanh(softplus(x)) = (e^2 + 2e) / (e^2 + 2e + 2) with e = exp(x); one exp
    # for value and slope. Beyond x = 20 the ratio is 1 to double precision.
    e = np.exp(np.minimum(x, 20.0))
    n = e * (e + 2.0)
    tsp = n / (n + 2.0)
    sig = e / (1.0 + e)
    return x * tsp, tsp + x * (1.0 - tsp * tsp) * sig


def _tanh_fused(x):
    y = np.tanh(x)
    return y, 1.0 - y * y


_ACTIVATIONS = {
    "mish": _mish_fused,
    "tanh": _tanh_fused,
}


@dataclass(frozen=True)
class Mlp:
    """Fully connected network; ``weights[i]`` has shape (out, in).

    Hidden layers use ``activation``; the output layer is affine.
    """

    weights: tuple
    biases: tuple
    activation: str = "mish"

    def __post_init__(self):
        ws = tuple(np.asarray(w, dtype=float) for w in self.weights)
        bs = tuple(np.asarray(b, dtype=float) for b in self.biases)
        if len(ws) == 0 or len(ws) != len(bs):
            raise ShapeError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} incompatible with bias {b.shape}")
            if i > 0 and w.shape[1] != ws[i - 1].shape[0]:
                raise ShapeError(f"layer {i} expects {w.shape[1]} inputs, previous layer gives {ws[i - 1].shape[0]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NonFiniteError(f"layer {i} has non-finite parameters", index=i)
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def layer_sizes(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_inputs(self):
        return self.weights[0].shape[1]

    @property
    def n_outputs(self):
        return self.weights[-1].shape[0]

    def params(self):
        """Parameters in canonical order W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> "Mlp":
        params = list(params)
        if len(params) != 2 * len(self.weights):
            raise ShapeError(f"expected {2 * len(self.weights)} parameter arrays, got {len(params)}")
        for old, new in zip(self.params(), params):
            if np.shape(new) != old.shape:
                raise ShapeError(f"parameter shape {np.shape(new)} does not match {old.shape}")
        return Mlp(tuple(params[0::2]), tuple(params[1::2]), self.activation)

    def flat_params(self):
        return np.concatenate([p.ravel() for p in self.params()])

    def with_flat_params(self, theta):
        theta = np.asarray(theta, dtype=float)
        out, i = [], 0
        for p in self.params():
            out.append(theta[i:i + p.size].reshape(p.shape))
            i += p.size
        if i != theta.size:
            raise ShapeError(f"flat vector has {theta.size} entries, network has {i}")
        return self.with_params(out)


def init_mlp(sizes: Sequence[int], rng: "RngStream", activation="mish") -> Mlp:
    """He-style uniform init; the output layer is scaled down so initial
    velocities start near zero."""
    ws, bs = [], []
    n_layers = len(sizes) - 1
    for i in range(n_layers):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        bound = np.sqrt(6.0 / fan_in) if i < n_layers - 1 else 0.1 * np.sqrt(3.0 / fan_in)
        ws.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return Mlp(tuple(ws), tuple(bs), activation)


def _as_batch(net: Mlp, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != net.n_inputs:
        raise ShapeError(f"input shape {x.shape} does not match network input size {net.n_inputs}")
    return xb, single


def _forward_cache(net: Mlp, xb):
    act = _ACTIVATIONS[net.activation]
    slopes, post = [], [xb]
    h = xb
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        if i == last:
            h = z
        else:
            h, slope = act(z)
            slopes.append(slope)
        post.append(h)
    return slopes, post


def mlp_forward(net: Mlp, x):
    xb, single = _as_batch(net, x)
    _, post = _forward_cache(net, xb)
    out = post[-1]
    return out[0] if single else out


def mlp_backward(net: Mlp, x, upstream):
    """Reverse-mode gradients of ``sum(upstream * forward(x))``.

    Returns ``(param_grads, input_grad)`` with ``param_grads`` ordered as
    :meth:`Mlp.params`. Batched inputs accumulate parameter gradients over
    rows.
    """
    xb, single = _as_batch(net, x)
    up = np.asarray(upstream, dtype=float)
    up = up[None, :] if single and up.ndim == 1 else up
    if up.shape != (xb.shape[0], net.n_outputs):
        raise ShapeError(f"upstream shape {np.shape(upstream)} does not match output {(xb.shape[0], net.n_outputs)}")
    slopes, post = _forward_cache(net, xb)
    grads = [None] * (2 * len(net.weights))
    delta = up
    for i in range(len(net.weights) - 1, -1, -1):
        if i != len(net.weights) - 1:
            delta = delta * slopes[i]
        grads[2 * i] = delta.T @ post[i]
        grads[2 * i + 1] = delta.sum(axis=0)
        delta = delta @ net.weights[i]
    return grads, (delta[0] if single else delta)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.step < 0:
            raise ValueError("step counter must be non-negative")
        if len(self.m) != len(self.v) or any(a.shape != b.shape for a, b in zip(self.m, self.v)):
            raise ShapeError("first and second moments must have matching shapes")


def adam_init(params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState([np.zeros_like(p, dtype=float) for p in params],
                     [np.zeros_like(p, dtype=float) for p in params],
                     0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer moments must have the same length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g) or np.shape(p) != state.m[i].shape:
            raise ShapeError(f"tensor {i}: param {np.shape(p)}, grad {np.shape(g)}, moment {state.m[i].shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.flatnonzero(~np.isfinite(np.ravel(g)))[0])
            raise NonFiniteError(f"non-finite gradient in tensor {i} at flat index {bad}", index=(i, bad))
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        new_p.append(p - state.lr * mhat / (np.sqrt(vhat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h=1e-5):
    """Central-difference gradient of a scalar function."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    g = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        fp = f(xp[0] if scalar else xp)
        fm = f(xm[0] if scalar else xm)
        g.flat[i] = (fp - fm) / (2.0 * h)
    return float(g[0]) if scalar else g


@dataclass
class RngStream:
    """Philox counter-based stream keyed by ``(seed, stream)``.

    Substreams extend the key, so trials and components never share state.
    """

    seed: int
    stream: tuple = ()
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF
        if isinstance(self.stream, (int, np.integer)):
            self.stream = (int(self.stream),)
        self.stream = tuple(int(s) for s in self.stream)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def substream(self, index: int) -> "RngStream":
        return RngStream(self.seed, self.stream + (int(index),))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)


def rng_stream(seed: int, stream: int = 0) -> RngStream:
    return RngStream(seed, stream)
