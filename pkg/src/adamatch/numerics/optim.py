"""First-order optimizer: SGD with momentum and decoupled weight decay."""

from __future__ import annotations

import numpy as np

from ..errors import ContractViolation
from .tensor import Tensor


class OptimizerState:
    """Hyperparameters plus one velocity buffer per parameter.

    Velocity buffers are keyed by parameter identity and created lazily at
    the first step, matching the parameter's shape.
    """

    def __init__(self, learning_rate: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        if learning_rate < 0:
            raise ContractViolation("learning_rate must be nonnegative")
        if not 0.0 <= momentum < 1.0:
            raise ContractViolation("momentum must lie in [0, 1)")
        if weight_decay < 0:
            raise ContractViolation("weight_decay must be nonnegative")
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocities: dict[int, np.ndarray] = {}

    def velocity(self, param: Tensor) -> np.ndarray:
        buf = self.velocities.get(id(param))
        if buf is None:
            buf = np.zeros_like(param.values)
            self.velocities[id(param)] = buf
        return buf


def sgd_step(state: OptimizerState, params: list[Tensor]) -> None:
    """v <- momentum*v + grad; p <- p - lr*(v + weight_decay*p); grads zeroed."""
    for p in params:
        if not p.requires_grad or p.grad is None:
            raise ContractViolation("sgd_step on parameter without gradient")
    for p in params:
        v = state.velocity(p)
        v *= state.momentum
        v += p.grad
        p.values -= state.learning_rate * (v + state.weight_decay * p.values)
        p.zero_grad()


class AdamWState:
    """Adaptive moments with decoupled weight decay (the training-side
    companion of the plain SGD step)."""

    def __init__(self, learning_rate: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if learning_rate < 0 or weight_decay < 0:
            raise ContractViolation("learning_rate and weight_decay must be nonnegative")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ContractViolation("betas must lie in [0, 1)")
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}

    def _buffers(self, p: Tensor) -> tuple[np.ndarray, np.ndarray]:
        if id(p) not in self.m:
            self.m[id(p)] = np.zeros_like(p.values)
            self.v[id(p)] = np.zeros_like(p.values)
        return self.m[id(p)], self.v[id(p)]


def adamw_step(state: AdamWState, params: list[Tensor]) -> None:
    for p in params:
        if not p.requires_grad or p.grad is None:
            raise ContractViolation("adamw_step on parameter without gradient")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p in params:
        m, v = state._buffers(p)
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.values -= state.learning_rate * (update + state.weight_decay * p.values)
        p.zero_grad()
