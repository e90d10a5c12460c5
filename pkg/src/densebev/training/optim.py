"""Optimisers over a ``name -> Tensor`` parameter dict."""
from __future__ import annotations

import math

import numpy as np


def clip_grad_norm(params: dict, max_norm: float | None) -> float:
    grads = [t.grad for t in params.values() if t.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


class MomentumSGD:
    def __init__(self, params: dict, lr: float = 0.01, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self):
        for k, t in self.params.items():
            if t.grad is None:
                continue
            v = self.velocity[k]
            v *= self.momentum
            v += t.grad
            t.data -= self.lr * v


class Adam:
    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, t in self.params.items():
            if t.grad is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * t.grad
            v *= self.b2
            v += (1.0 - self.b2) * t.grad * t.grad
            t.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, params: dict, lr: float, momentum: float = 0.9):
    if name == "sgd":
        return MomentumSGD(params, lr, momentum)
    if name == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer {name!r}")
