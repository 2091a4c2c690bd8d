"""Bias-corrected Adam. The functional core works on plain arrays; the
class form keeps per-parameter state keyed by tensor node id and updates
parameter buffers in place between tapes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import GradientMap, Tensor


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    step: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> np.ndarray:
    """One update for one parameter; mutates `state`, returns the new values.

    `step` is 1-based and drives the bias correction.
    """
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1**step)
    v_hat = state.v / (1.0 - beta2**step)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class Adam:
    params: list[Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    _state: dict[int, AdamState] = field(default_factory=dict)

    def step(self, grads: GradientMap) -> None:
        self.step_count += 1
        for p in self.params:
            state = self._state.get(p.node_id)
            if state is None:
                state = AdamState(np.zeros_like(p.values), np.zeros_like(p.values))
                self._state[p.node_id] = state
            p.values[...] = adam_step(
                p.values,
                grads.array(p),
                state,
                self.step_count,
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
            )
