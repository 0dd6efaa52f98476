"""First-order optimizers acting in place on dicts of numpy arrays."""

from __future__ import annotations

import math

import numpy as np

from doicr.errors import ContractError, NumericError

OPTIMIZERS = ("sgd", "adam", "adamw")


class SGD:
    """Plain gradient descent; weight decay is added to the gradient."""

    def __init__(self, lr: float, weight_decay: float = 0.0):
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for k, p in params.items():
            g = grads[k]
            if self.weight_decay:
                g = g + self.weight_decay * p
            p -= self.lr * g


class Adam:
    """Adam with L2 regularization folded into the gradient."""

    decoupled = False

    def __init__(self, lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and self.decoupled:
                p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class AdamW(Adam):
    """Adam with weight decay applied directly to the weights."""

    decoupled = True


def make_optimizer(name: str, lr: float, weight_decay: float = 0.0):
    if lr <= 0:
        raise ContractError("learning rate must be positive")
    if weight_decay < 0:
        raise ContractError("weight decay must be nonnegative")
    if name == "sgd":
        return SGD(lr, weight_decay)
    if name == "adam":
        return Adam(lr, weight_decay)
    if name == "adamw":
        return AdamW(lr, weight_decay)
    raise ContractError(f"unknown optimizer {name!r}; choose from {OPTIMIZERS}")


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], bool]:
    """Rescale ``grads`` so their global L2 norm is at most ``max_norm``."""
    peak = max((float(np.max(np.abs(g))) for g in grads.values() if g.size), default=0.0)
    if not math.isfinite(peak):
        raise NumericError("non-finite gradient")
    if peak == 0.0:
        return grads, False
    # scaling by the largest entry keeps the squares from overflowing
    total = peak * math.sqrt(sum(float(np.sum((g / peak) ** 2)) for g in grads.values()))
    if total <= max_norm:
        return grads, False
    factor = max_norm / total
    return {k: g * factor for k, g in grads.items()}, True
