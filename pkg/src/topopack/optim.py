from __future__ import annotations

import numpy as np


class SGD:
    """Plain gradient descent with optional heavy-ball momentum and global
    gradient-norm clipping."""

    def __init__(self, lr: float, momentum: float = 0.0, clip_norm: float | None = None):
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> None:
        grads = {n: g for n, g in grads.items() if g is not None}
        if self.clip_norm is not None:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.clip_norm:
                grads = {n: g * (self.clip_norm / norm) for n, g in grads.items()}
        for name, g in grads.items():
            if self.momentum:
                v = self.velocity.get(name)
                v = g if v is None else self.momentum * v + g
                self.velocity[name] = v
                g = v
            params[name] = params[name] - self.lr * g
