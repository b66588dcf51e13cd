"""Adam over lists of autodiff leaf tensors."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 maximize: bool = False):
        self.params = list(params)
        self.lr = lr
        self.base_lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.sign = -1.0 if maximize else 1.0
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        """Apply one update from the accumulated ``.grad``; returns the gradient norm."""
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        sq = 0.0
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = self.sign * p.grad
            sq += float((g * g).sum())
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return float(np.sqrt(sq))
