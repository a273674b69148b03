"""Gradient-descent and Adam steps over named tensor maps."""

from __future__ import annotations

from collections.abc import Mapping

import numpy as np

from .tensor_core import NamedTensorMap, NonFiniteError


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], ascent: bool = False) -> dict:
        sign = 1.0 if ascent else -1.0
        return {k: params[k] + sign * self.lr * grads[k] for k in grads}


class Adam:
    """Adam with bias correction; state keyed by parameter name."""

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], ascent: bool = False) -> dict:
        self.t += 1
        sign = 1.0 if ascent else -1.0
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        out = {}
        for k in sorted(grads):
            g = grads[k]
            m = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            v = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = params[k] + sign * self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def make_optimizer(name: str, lr: float):
    if name in ("adam", "adaptive"):
        return Adam(lr)
    if name in ("sgd", "gd"):
        return SGD(lr)
    raise ValueError(f"unknown optimizer {name!r}")


def apply_update(params: NamedTensorMap, new_values: Mapping[str, np.ndarray]) -> NamedTensorMap:
    for k, v in new_values.items():
        if not np.all(np.isfinite(v)):
            raise NonFiniteError(f"optimizer produced non-finite values in {k!r}")
    return params.updated(new_values)
