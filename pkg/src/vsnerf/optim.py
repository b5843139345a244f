"""Adam-style adaptive update over dictionaries of named parameter arrays."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
                   state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> Dict[str, np.ndarray]:
    """One bias-corrected Adam update.

    Returns new parameter arrays; ``state`` is advanced in place.  A parameter
    whose gradient is zero in every step so far is left exactly unchanged.
    """
    if set(params) != set(grads):
        raise ValueError(f"parameter/gradient keys differ: {sorted(set(params) ^ set(grads))}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        out[name] = (p - step).astype(p.dtype, copy=False)
    return out
