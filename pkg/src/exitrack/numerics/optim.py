from __future__ import annotations

import numpy as np

from .tensor import Tensor


class AdamW:
    """Adam with decoupled weight decay.

    ``groups`` is a list of ``(params, lr)`` pairs so the backbone and heads
    can run at different rates. Decay is skipped for 1-D tensors (biases,
    norm gains) as is customary.
    """

    def __init__(self, groups: list[tuple[list[Tensor], float]], betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        self.groups = [(list(params), float(lr)) for params, lr in groups]
        self.base_lrs = [lr for _, lr in self.groups]
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def scale_lr(self, factor: float) -> None:
        self.groups = [(params, base * factor) for (params, _), base in zip(self.groups, self.base_lrs)]

    def zero_grad(self) -> None:
        for params, _ in self.groups:
            for p in params:
                p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for params, lr in self.groups:
            for p in params:
                if p.grad is None:
                    continue
                key = id(p)
                g = p.grad.astype(p.dtype, copy=False)
                m = self._m.get(key)
                if m is None:
                    m = self._m[key] = np.zeros_like(p.data)
                    self._v[key] = np.zeros_like(p.data)
                v = self._v[key]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                if self.weight_decay and p.ndim > 1:
                    p.data *= 1.0 - lr * self.weight_decay
                p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
