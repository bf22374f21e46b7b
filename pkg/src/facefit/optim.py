"""Adam over named parameter blocks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DivergenceError(RuntimeError):
    """Raised when an optimisation produces non-finite values or explodes."""

    def __init__(self, message: str, last_good=None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
              ) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update of the blocks named in ``grads``.

    Blocks absent from ``grads`` are passed through untouched. Inputs are not
    mutated.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name!r} at step {state.step + 1}")
    t = state.step + 1
    new_params = dict(params)
    m_all, v_all = dict(state.m), dict(state.v)
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        m = beta1 * m_all.get(name, np.zeros_like(g)) + (1.0 - beta1) * g
        v = beta2 * v_all.get(name, np.zeros_like(g)) + (1.0 - beta2) * (g * g)
        m_all[name], v_all[name] = m, v
        new_params[name] = params[name] - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return new_params, AdamState(t, m_all, v_all)
