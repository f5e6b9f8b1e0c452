"""Adam with bias correction, operating in place on named float64 arrays."""
from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    active: np.ndarray | None = None,
) -> None:
    """Apply one bias-corrected Adam update to ``params`` in place.

    ``active`` optionally selects slices along the leading axis of every
    parameter; inactive slices keep their values and moments untouched.  This
    is how independent per-pair optimizations stacked along axis 0 stop at
    different steps.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"shape mismatch for {name!r}: param {p.shape} vs grad {g.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ValueError(f"optimizer state for {name!r} has shape {m.shape}, param has {p.shape}")
        v = state.v[name]
        if active is None:
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        else:
            idx = np.flatnonzero(active)
            gs = g[idx]
            ms = b1 * m[idx] + (1.0 - b1) * gs
            vs = b2 * v[idx] + (1.0 - b2) * gs * gs
            m[idx] = ms
            v[idx] = vs
            p[idx] = p[idx] - state.lr * (ms / c1) / (np.sqrt(vs / c2) + state.eps)


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> None:
    for name, p in params.items():
        p -= lr * grads[name]
