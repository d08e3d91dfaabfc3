"""AdamW with decoupled weight decay over a dict of numpy tensors."""

from __future__ import annotations

import math

import numpy as np


class AdamW:
    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=1e-4, trainable=None):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.trainable = list(params) if trainable is None else list(trainable)
        self.m = {k: np.zeros_like(params[k]) for k in self.trainable}
        self.v = {k: np.zeros_like(params[k]) for k in self.trainable}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k in self.trainable:
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p = params[k]
            # decay matrices only; biases and norm gains are left alone
            if self.weight_decay and p.ndim >= 2:
                p *= 1.0 - lr * self.weight_decay
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def cosine_lr(base_lr: float, step: int, total: int, floor: float = 0.0) -> float:
    if total <= 0:
        return base_lr
    frac = min(step / total, 1.0)
    return floor + (base_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))
