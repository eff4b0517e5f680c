"""AdamW with decoupled weight decay."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict, grads: dict[str, np.ndarray], state: OptimizerState) -> bool:
    """Update ``params`` (name -> Tensor) in place from ``grads`` (name -> array).

    Names missing from ``grads`` are left untouched (frozen). Returns False
    and leaves everything unchanged when any gradient is non-finite.
    """
    for name, g in grads.items():
        if g.shape != params[name].data.shape:
            raise ValueError(f"adamw_step: gradient for {name} has shape {g.shape}, "
                             f"parameter has {params[name].data.shape}")
        if not np.all(np.isfinite(g)):
            log.warning("adamw_step: non-finite gradient in %s; step rejected", name)
            return False

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name in sorted(grads):
        g = grads[name]
        p = params[name].data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True
