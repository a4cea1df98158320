"""Local optimizers acting in place on named float64 arrays."""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError


class SGD:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 0.1):
        self.params = params
        self.lr = lr

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p -= self.lr * grads[k]


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind: str, params: dict[str, np.ndarray], lr: float, **kw):
    if kind == "adam":
        return Adam(params, lr=lr, **kw)
    if kind == "sgd":
        return SGD(params, lr=lr)
    raise ConfigurationError(f"unknown optimizer {kind!r}")
