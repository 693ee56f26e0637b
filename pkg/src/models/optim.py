"""
Optimizers. step() is the only place parameter values are mutated.
"""

from typing import Dict, List, Sequence

import numpy as np

from src.autodiff.engine import DiffNode


class Optimizer:
    def __init__(self, params: Sequence[DiffNode], learning_rate: float):
        if learning_rate < 0:
            raise ValueError(f"learning rate must be >= 0, got {learning_rate}")
        self.params: List[DiffNode] = list(params)
        self.learning_rate = learning_rate

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, params: Sequence[DiffNode], learning_rate: float, momentum: float = 0.0):
        super().__init__(params, learning_rate)
        self.momentum = momentum
        self._velocity: Dict[int, np.ndarray] = {}

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            update = p.grad
            if self.momentum:
                v = self._velocity.get(id(p))
                v = update if v is None else self.momentum * v + update
                self._velocity[id(p)] = v
                update = v
            p.value = p.value - self.learning_rate * update


class Adam(Optimizer):
    def __init__(
        self,
        params: Sequence[DiffNode],
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        super().__init__(params, learning_rate)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {id(p): np.zeros_like(p.value) for p in self.params}
        self._v = {id(p): np.zeros_like(p.value) for p in self.params}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            if p.grad is None:
                continue
            key = id(p)
            m = self.beta1 * self._m[key] + (1.0 - self.beta1) * p.grad
            v = self.beta2 * self._v[key] + (1.0 - self.beta2) * p.grad * p.grad
            self._m[key], self._v[key] = m, v
            p.value = p.value - self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


def build_optimizer(params: Sequence[DiffNode], config) -> Optimizer:
    """Optimizer named by config.optimizer ("adam" or "sgd")."""
    if config.optimizer == "adam":
        return Adam(params, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
    if config.optimizer == "sgd":
        return SGD(params, config.learning_rate, config.momentum)
    raise ValueError(f"Unknown optimizer: {config.optimizer}")
