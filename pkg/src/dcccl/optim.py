from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Parameter


class MissingGradientError(RuntimeError):
    pass


def _check(params: Sequence[Parameter]) -> None:
    for p in params:
        if not p.frozen and p.grad is None:
            raise MissingGradientError(f"parameter {p.name or p.shape} has no gradient")


def sgd_step(params: Sequence[Parameter], lr: float) -> None:
    """p <- p - lr * g for every non-frozen parameter."""
    _check(params)
    for p in params:
        if not p.frozen:
            p.data -= lr * p.grad


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)


def adam_step(params: Sequence[Parameter], state: OptimizerState) -> None:
    _check(params)
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    state.step_count += 1
    t = state.step_count
    b1, b2, eps = state.adam_beta1, state.adam_beta2, state.adam_epsilon
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, m, v in zip(params, state.first_moment, state.second_moment):
        if p.frozen:
            continue
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + eps)


class Optimizer:
    """Thin stateful wrapper around :func:`sgd_step` / :func:`adam_step`."""

    def __init__(self, params: Sequence[Parameter], kind: str = "sgd", lr: float = 0.01):
        kind = kind.lower()
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.state = OptimizerState(kind=kind, learning_rate=lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        if self.state.kind == "sgd":
            sgd_step(self.params, self.state.learning_rate)
            self.state.step_count += 1
        else:
            adam_step(self.params, self.state)
