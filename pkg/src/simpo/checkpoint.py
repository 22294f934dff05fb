"""Versioned text checkpoints for flow policies.

Arrays are stored as whitespace-separated ``%.17g`` decimals, which is
enough digits for every double to parse back to the same bits.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .exceptions import SimpoError
from .numkit import AdamState, Mlp

__all__ = ["SCHEMA_VERSION", "Checkpoint", "encode_array", "decode_array", "save_checkpoint",
           "load_checkpoint", "checkpoint_from_matcher", "restore_matcher"]

SCHEMA_VERSION = 1


class CheckpointError(SimpoError, ValueError):
    pass


def encode_array(a) -> str:
    a = np.asarray(a, dtype=float).ravel()
    return " ".join("%.17g" % x for x in a)


def decode_array(text: str, shape) -> np.ndarray:
    vals = np.array([float(tok) for tok in text.split()], dtype=float)
    if vals.size != int(np.prod(shape, dtype=int)):
        raise CheckpointError(f"array text has {vals.size} values, shape {tuple(shape)} needs {int(np.prod(shape))}")
    return vals.reshape(shape)


@dataclass
class Checkpoint:
    net: Mlp
    optimizer: AdamState
    epoch: int = 0
    lam: float = 1.0
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        params = self.net.params()
        return {
            "schema_version": SCHEMA_VERSION,
            "activation": self.net.activation,
            "layer_sizes": self.net.layer_sizes,
            "params": [{"shape": list(p.shape), "data": encode_array(p)} for p in params],
            "optimizer": {
                "step": self.optimizer.step,
                "lr": "%.17g" % self.optimizer.lr,
                "beta1": "%.17g" % self.optimizer.beta1,
                "beta2": "%.17g" % self.optimizer.beta2,
                "eps": "%.17g" % self.optimizer.eps,
                "m": [encode_array(m) for m in self.optimizer.m],
                "v": [encode_array(v) for v in self.optimizer.v],
            },
            "epoch": int(self.epoch),
            "lambda": "%.17g" % self.lam,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d):
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise CheckpointError(f"unsupported checkpoint schema version {version!r}")
        try:
            shapes = [tuple(p["shape"]) for p in d["params"]]
            params = [decode_array(p["data"], s) for p, s in zip(d["params"], shapes)]
            net = Mlp(tuple(params[0::2]), tuple(params[1::2]), d["activation"])
            if net.layer_sizes != list(d["layer_sizes"]):
                raise CheckpointError(f"layer sizes {net.layer_sizes} disagree with header {d['layer_sizes']}")
            o = d["optimizer"]
            opt = AdamState([decode_array(m, s) for m, s in zip(o["m"], shapes)],
                            [decode_array(v, s) for v, s in zip(o["v"], shapes)],
                            int(o["step"]), float(o["lr"]), float(o["beta1"]), float(o["beta2"]),
                            float(o["eps"]))
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"malformed checkpoint: missing or bad field {exc}") from None
        return cls(net, opt, int(d["epoch"]), float(d["lambda"]), dict(d.get("meta", {})))


def save_checkpoint(ckpt: Checkpoint, path):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(ckpt.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: not a checkpoint ({exc.msg} at line {exc.lineno})") from None
    return Checkpoint.from_dict(d)


def checkpoint_from_matcher(matcher, epoch=0, lam=1.0, meta=None) -> Checkpoint:
    return Checkpoint(matcher.policy_.net, matcher.optimizer_, epoch, lam, dict(meta or {}))


def restore_matcher(matcher, ckpt: Checkpoint):
    """Load network and optimizer state into a fitted matcher of the same shape."""
    if matcher.policy_.net.layer_sizes != ckpt.net.layer_sizes:
        raise CheckpointError(f"checkpoint layers {ckpt.net.layer_sizes} do not match "
                              f"policy layers {matcher.policy_.net.layer_sizes}")
    matcher.policy_ = matcher.policy_.with_net(ckpt.net)
    matcher.optimizer_ = ckpt.optimizer
    return matcher
