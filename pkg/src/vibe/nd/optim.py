"""Gradient clipping and the AdamW optimiser."""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            g = p.grad.astype(np.float64, copy=False)
            total += float(np.dot(g.ravel(), g.ravel()))
    return math.sqrt(total)


def clip_global_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    params = [p for p in params if p.grad is not None]
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad = (p.grad * scale).astype(p.dtype, copy=False)
    return norm


class AdamW:
    """Adam with decoupled weight decay.

    ``state_dict`` exposes the moments and step count so runs can be
    checkpointed; ``lr`` is mutable for schedulers.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-5):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        lr = self.lr
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            denom = np.sqrt(v / c2) + self.eps
            p.data -= (lr / c1) * m / denom

    def state_dict(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v,
                "betas": (self.beta1, self.beta2), "eps": self.eps}
