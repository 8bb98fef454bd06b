from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(tensors: dict, grads: dict, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999,
              eps=1e-8) -> dict:
    """Bias-corrected Adam update. Returns new tensors; ``state`` advances in place."""
    state.step += 1
    t = state.step
    out = dict(tensors)
    for k, g in grads.items():
        g = g.astype(np.float64)
        m = beta1 * state.m.get(k, 0.0) + (1 - beta1) * g
        v = beta2 * state.v.get(k, 0.0) + (1 - beta2) * g * g
        state.m[k], state.v[k] = m, v
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p = tensors[k]
        out[k] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
    return out
