"""Adam optimizer over autodiff tensors, with per-phase linear LR decay."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Adam:
    """Adam with bias correction. Parameters with ``grad is None`` are skipped."""

    def __init__(self, params: list[Tensor], lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self._m[i] = b1 * self._m[i] + (1.0 - b1) * g
            self._v[i] = b2 * self._v[i] + (1.0 - b2) * g * g
            m_hat = self._m[i] / (1.0 - b1 ** self.t)
            v_hat = self._v[i] / (1.0 - b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def linear_decay(lr0: float, epoch: int, total_epochs: int) -> float:
    """Linearly decayed learning rate for the given zero-based epoch."""
    if total_epochs <= 0:
        return lr0
    return lr0 * (1.0 - epoch / float(total_epochs))
