"""Adam optimizer with the published default hyperparameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["AdamConfig", "AdamState", "adam_step"]


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    """First/second moment estimates per parameter plus the shared timestep."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, hyper: AdamConfig = AdamConfig()) -> None:
    """One in-place Adam update with bias correction."""
    state.t += 1
    b1, b2 = hyper.beta1, hyper.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p -= (hyper.learning_rate * mhat / (np.sqrt(vhat) + hyper.eps)).astype(p.dtype)
