"""Adam optimiser over a name -> Tensor parameter mapping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class TrainingError(RuntimeError):
    """Raised when optimisation hits a non-finite value."""


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray] | None = None,
    state: AdamState | None = None,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Apply one bias-corrected Adam update in place and return the state.

    ``grads`` defaults to each parameter's ``.grad``; parameters without a
    gradient are left untouched (their moments are not advanced either).
    """
    state = state or AdamState()
    if grads is None:
        grads = {name: p.grad for name, p in params.items() if p.grad is not None}
    for name, g in grads.items():
        if g is None:
            continue
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name!r} shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    corr1 = 1.0 - beta1**t
    corr2 = 1.0 - beta2**t
    for name, g in grads.items():
        if g is None:
            continue
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data, dtype=np.float64)
            v = np.zeros_like(p.data, dtype=np.float64)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g.astype(np.float64) ** 2)
        state.m[name], state.v[name] = m, v
        update = lr * (m / corr1) / (np.sqrt(v / corr2) + eps)
        p.data -= update.astype(p.data.dtype)
    return state
