"""Finite-difference verification of backward()."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6,
               max_entries: Optional[int] = 64, seed: int = 0, floor: float = 1e-6) -> float:
    """Max relative error between backward() and central differences.

    ``fn`` rebuilds the scalar graph from the current parameter values.
    At most ``max_entries`` coordinates per parameter are probed (chosen at
    random, deterministically). Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    out = fn()
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = fn().item()
            flat[i] = old - h
            fm = fn().item()
            flat[i] = old
            num = (fp - fm) / (2 * h)
            ana = a.reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
