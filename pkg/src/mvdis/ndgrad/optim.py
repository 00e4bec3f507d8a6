"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0 or self.weight_decay < 0 or not (0 < self.beta1 < 1) or not (0 < self.beta2 < 1):
            raise ValueError("Adam hyperparameters out of range")


def adam_init(params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> AdamState:
    return AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay,
                     m=[np.zeros_like(p.data) for p in params],
                     v=[np.zeros_like(p.data) for p in params])


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> AdamState:
    """Apply one Adam update to ``params`` in place and return the state.

    A non-zero ``weight_decay`` adds the L2 gradient wd·p before the moments.
    """
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError("params, grads and moment lists differ in length")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"param {i}: shape {p.shape} vs grad {g.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        v = state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


class Adam:
    """Convenience wrapper binding a parameter list to its :class:`AdamState`."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, **kw):
        self.params = list(params)
        self.state = adam_init(self.params, lr=lr, **kw)

    def step(self, grads: dict[Tensor, np.ndarray] | Sequence[np.ndarray]) -> None:
        if isinstance(grads, dict):
            grads = [grads[p] for p in self.params]
        adam_step(self.state, self.params, grads)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, (m, v) in enumerate(zip(self.state.m, self.state.v)):
            out[f"{prefix}.m.{i}"] = m
            out[f"{prefix}.v.{i}"] = v
        out[f"{prefix}.step"] = np.array([float(self.state.step)])
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str) -> None:
        for i in range(len(self.params)):
            self.state.m[i] = np.array(arrays[f"{prefix}.m.{i}"], copy=True)
            self.state.v[i] = np.array(arrays[f"{prefix}.v.{i}"], copy=True)
        self.state.step = int(arrays[f"{prefix}.step"][0])
