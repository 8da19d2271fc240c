"""Adaptive optimizer with decoupled weight decay.

The decay multiplies parameters directly (it never enters the moment
estimates), so with zero gradients a single step shrinks weights by exactly
``1 - lr * weight_decay``.  With ``weight_decay=0`` the update is plain
bias-corrected Adam, and with ``lr=0`` parameters are returned unchanged
bit for bit.
"""

from __future__ import annotations

import numpy as np


class AdamW:
    """Holds first/second moment estimates for one named parameter tree."""

    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        if lr < 0:
            raise ValueError("lr must be >= 0")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]) -> None:
        """Apply one update in place.  Missing grads are treated as zero."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            if name not in self.m:
                raise KeyError(f"unknown parameter {name!r}")
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != param shape "
                                 f"{p.shape} for {name!r}")
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def reset(self) -> None:
        self.step_count = 0
        for k in self.m:
            self.m[k][...] = 0.0
            self.v[k][...] = 0.0
