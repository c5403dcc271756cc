"""Adam optimizer and gradient-norm utilities."""

from __future__ import annotations

import math

import numpy as np

from .errors import StateError
from .tensor import Tensor


class Adam:
    """Adam with bias-corrected first and second moments.

    m <- b1*m + (1-b1)*g
    v <- b2*v + (1-b2)*g*g
    w <- w - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)

    Gradients are consumed: step() clears every .grad it read, so a
    forgotten backward on the next iteration surfaces as a StateError
    instead of a silent reuse of stale gradients.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 2e-4,
                 beta1: float = 0.8, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise StateError(f"Adam.step: parameter {name!r} has no gradient")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (self.lr * update).astype(p.data.dtype, copy=False)
            p.grad = None

    def state(self) -> dict:
        return {
            "t": self.t,
            "m": {k: a for k, a in self.m.items()},
            "v": {k: a for k, a in self.v.items()},
        }

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.params:
            if k not in state["m"] or k not in state["v"]:
                raise StateError(f"optimizer state missing moments for {k!r}")
            self.m[k] = np.array(state["m"][k], dtype=self.params[k].data.dtype)
            self.v[k] = np.array(state["v"][k], dtype=self.params[k].data.dtype)


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm.

    Returns the pre-clip norm for logging.
    """
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= p.data.dtype.type(factor)
    return norm
