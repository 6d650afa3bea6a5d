"""Bias-corrected Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractViolation, Tensor


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update; returns new parameter arrays and a new state.

    Inputs are left untouched.
    """
    if state.lr < 0:
        raise ContractViolation("learning rate must be non-negative")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractViolation(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)


class Adam:
    """Stateful wrapper that writes updates back into parameter tensors."""

    def __init__(self, params: dict[str, Tensor], lr: float = 2e-4, **kw):
        self.params = params
        self.state = AdamState(lr=lr, **kw)

    def step(self, grads: dict[str, np.ndarray]) -> None:
        current = {k: p.data for k, p in self.params.items()}
        updated, self.state = adam_step(current, grads, self.state)
        for k, p in self.params.items():
            p.data = updated[k]
