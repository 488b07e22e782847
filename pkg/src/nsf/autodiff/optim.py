"""Adam with bias-corrected moments and per-group learning rates."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[int, np.ndarray] = field(default_factory=dict)
    v: Dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr=None) -> None:
    """One in-place Adam update; ``None`` gradients leave a parameter untouched."""
    state.step += 1
    t = state.step
    lr = state.lr if lr is None else lr
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g in zip(params, grads):
        if g is None:
            continue
        key = id(p)
        if key not in state.m:
            state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        m, v = state.m[key], state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Optimizer over parameter groups ``[(params, lr), ...]``."""

    def __init__(self, groups, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if groups and isinstance(groups[0], Tensor):
            raise TypeError("pass parameter groups as [(params, lr), ...]")
        self.groups: List[Tuple[List[Tensor], float]] = [(list(ps), float(lr)) for ps, lr in groups]
        self.states = [AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps) for _, lr in self.groups]

    def parameters(self) -> List[Tensor]:
        return [p for ps, _ in self.groups for p in ps]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def step(self, lr_scale: float = 1.0) -> None:
        for (ps, lr), st in zip(self.groups, self.states):
            adam_step(ps, [p.grad for p in ps], st, lr=lr * lr_scale)
