"""Adam with bias correction."""

from __future__ import annotations

import numpy as np

from .errors import FrozenParameterError, ValidationError
from .tensor import Parameter


class AdamState:
    """Per-parameter moment estimates plus hyperparameters."""

    def __init__(
        self,
        shape: tuple[int, ...],
        dtype,
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        if learning_rate <= 0:
            raise ValidationError(f"learning_rate must be positive, got {learning_rate}")
        self.first_moment = np.zeros(shape, dtype=dtype)
        self.second_moment = np.zeros(shape, dtype=dtype)
        self.step_count = 0
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)


def adam_step(param: Parameter, state: AdamState) -> None:
    """One in-place Adam update. Clears the gradient afterwards."""
    if param.frozen:
        raise FrozenParameterError(f"adam_step on frozen parameter {param.name!r}")
    g = param.grad
    if g is None:
        raise ValidationError(f"adam_step: parameter {param.name!r} has no gradient")
    if g.shape != param.data.shape:
        raise ValidationError(
            f"adam_step: gradient shape {g.shape} != parameter shape {param.data.shape} for {param.name!r}"
        )
    state.step_count += 1
    t = state.step_count
    state.first_moment *= state.beta1
    state.first_moment += (1.0 - state.beta1) * g
    state.second_moment *= state.beta2
    state.second_moment += (1.0 - state.beta2) * (g * g)
    m_hat = state.first_moment / (1.0 - state.beta1**t)
    v_hat = state.second_moment / (1.0 - state.beta2**t)
    param.data[...] -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    param.clear_grad()


class Adam:
    """A group of parameters updated together with shared hyperparameters."""

    def __init__(self, params: list[Parameter], learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate parameter names in optimizer group: {names}")
        self.params = list(params)
        self.states = {
            p.name: AdamState(p.data.shape, p.data.dtype, learning_rate, beta1, beta2, epsilon)
            for p in self.params
        }

    def step(self) -> None:
        for p in self.params:
            adam_step(p, self.states[p.name])

    def clear_grads(self) -> None:
        for p in self.params:
            p.clear_grad()
