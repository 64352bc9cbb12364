"""Adam with a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float = 0.0, warmup: int = 0) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to ``min_lr`` at ``total_steps``."""
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float | None = 1.0
    t: int = 0
    _m: dict[str, np.ndarray] = field(default_factory=dict)
    _v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, Tensor], lr: float) -> dict[str, Tensor]:
        """Return updated parameters (fresh leaves); entries without a gradient are kept."""
        self.t += 1
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        scale = 1.0
        if self.grad_clip is not None and grads:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
        out = {}
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                out[name] = p
                continue
            g = g * scale
            m = self._m.get(name, np.zeros_like(g))
            v = self._v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self._m[name], self._v[name] = m, v
            mhat = m / (1 - self.beta1 ** self.t)
            vhat = v / (1 - self.beta2 ** self.t)
            upd = mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay and p.ndim >= 2:
                upd = upd + self.weight_decay * p.data
            out[name] = Tensor(p.data - lr * upd, requires_grad=True)
        return out
