"""First-order optimizers over flat parameter vectors.

``step`` returns a new array and never mutates the ``params`` argument; the
optimizer owns only its own moment accumulators.
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeError


class Optimizer:
    kind = "base"

    def __init__(self, size: int, lr: float):
        if lr < 0:
            raise ValueError("learning rate must be nonnegative")
        self.size = int(size)
        self.lr = float(lr)

    def _check(self, params, grad):
        params = np.asarray(params, dtype=np.float64)
        grad = np.asarray(grad, dtype=np.float64)
        if params.shape != (self.size,) or grad.shape != (self.size,):
            raise ShapeError(f"optimizer sized {self.size} got params {params.shape}, grad {grad.shape}")
        return params, grad

    def step(self, params, grad):
        raise NotImplementedError

    def reset(self):
        pass


class SGD(Optimizer):
    kind = "sgd"

    def step(self, params, grad):
        params, grad = self._check(params, grad)
        if self.lr == 0.0:
            return params.copy()
        return params - self.lr * grad


class RMSprop(Optimizer):
    kind = "rmsprop"

    def __init__(self, size, lr=1e-3, decay=0.9, eps=1e-8):
        super().__init__(size, lr)
        self.decay, self.eps = decay, eps
        self.v = np.zeros(self.size)

    def reset(self):
        self.v = np.zeros(self.size)

    def step(self, params, grad):
        params, grad = self._check(params, grad)
        self.v = self.decay * self.v + (1.0 - self.decay) * grad * grad
        if self.lr == 0.0:
            return params.copy()
        return params - self.lr * grad / (np.sqrt(self.v) + self.eps)


class Adam(Optimizer):
    """Adam with bias-corrected moments (Kingma & Ba)."""

    kind = "adam"

    def __init__(self, size, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        super().__init__(size, lr)
        self.b1, self.b2, self.eps = b1, b2, eps
        self.reset()

    def reset(self):
        self.m = np.zeros(self.size)
        self.v = np.zeros(self.size)
        self.t = 0

    def step(self, params, grad):
        params, grad = self._check(params, grad)
        self.t += 1
        self.m = self.b1 * self.m + (1.0 - self.b1) * grad
        self.v = self.b2 * self.v + (1.0 - self.b2) * grad * grad
        if self.lr == 0.0:
            return params.copy()
        m_hat = self.m / (1.0 - self.b1 ** self.t)
        v_hat = self.v / (1.0 - self.b2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind: str, size: int, lr: float) -> Optimizer:
    try:
        cls = {"sgd": SGD, "adam": Adam, "rmsprop": RMSprop}[kind]
    except KeyError:
        raise ValueError(f"unknown optimizer {kind!r}") from None
    return cls(size, lr=lr)
