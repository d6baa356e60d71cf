"""Adam without weight decay."""

from __future__ import annotations

from collections.abc import Iterable

import numpy as np

from .tensor import Tensor


class FreezingViolation(RuntimeError):
    pass


def adam_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam step; returns ``(new_param, new_m, new_v)``. ``step`` counts from 1."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        for p in self.params:
            if not p.requires_grad:
                raise FreezingViolation("optimizer given a tensor with requires_grad=False")
        if lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        for i, p in enumerate(self.params):
            if not p.requires_grad:
                raise FreezingViolation("a tensor was frozen after being handed to the optimizer")
            if p.grad is None:
                continue
            p.data, self.m[i], self.v[i] = adam_update(
                p.data, p.grad, self.m[i], self.v[i], self.step_count, self.lr,
                self.beta1, self.beta2, self.eps,
            )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def check_frozen_untouched(frozen: Iterable[Tensor]) -> None:
    """Raise if any frozen tensor carries a gradient."""
    for t in frozen:
        if t.grad is not None:
            raise FreezingViolation("gradient present on a frozen tensor")
