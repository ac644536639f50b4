"""SGD and Adam over lists of leaf tensors."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import ContractError, Tensor


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    first_moments: list = field(default_factory=list)
    second_moments: list = field(default_factory=list)
    step_count: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")


class Optimizer:
    """Owns the parameter list and its :class:`OptimizerState`."""

    def __init__(self, params: Sequence[Tensor], kind: str = "adam", lr: float = 1e-3, **kw):
        self.params = list(params)
        self.state = OptimizerState(kind=kind, learning_rate=lr, **kw)
        if kind == "adam":
            self.state.first_moments = [np.zeros_like(p.values) for p in self.params]
            self.state.second_moments = [np.zeros_like(p.values) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        optimizer_step(self.params, self.state)


def optimizer_step(params: Sequence[Tensor], state: OptimizerState) -> None:
    """Update ``params`` in place from their grads, then clear the grads."""
    for i, p in enumerate(params):
        if p.grad is None:
            name = p.name or f"#{i}"
            raise ContractError(f"optimizer_step: parameter {name} has no gradient")
    lr = state.learning_rate
    if state.kind == "sgd":
        for p in params:
            p.values -= lr * p.grad
    else:
        t = state.step_count + 1
        b1, b2 = state.beta1, state.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for p, m, v in zip(params, state.first_moments, state.second_moments):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.values -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    state.step_count += 1
    for p in params:
        p.grad = None


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale grads so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None)))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total
