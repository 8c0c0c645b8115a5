"""ADADELTA (Zeiler, 2012) with per-parameter running averages."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdadeltaState:
    rho: float = 0.95
    eps: float = 1e-6
    sq_grad: dict = field(default_factory=dict)
    sq_update: dict = field(default_factory=dict)


def adadelta_step(state, params, grads, rho=None, eps=None):
    """Apply one ADADELTA update in place to every parameter named in ``grads``.

    E[g^2] <- rho E[g^2] + (1 - rho) g^2
    dx     = -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
    E[dx^2] <- rho E[dx^2] + (1 - rho) dx^2
    """
    rho = state.rho if rho is None else rho
    eps = state.eps if eps is None else eps
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise FloatingPointError(f"non-finite gradient for {name}: {bad} of {np.size(g)} entries")
        p = params[name]
        eg = state.sq_grad.get(name)
        if eg is None:
            eg = state.sq_grad[name] = np.zeros_like(p)
            state.sq_update[name] = np.zeros_like(p)
        ex = state.sq_update[name]
        eg *= rho
        eg += (1 - rho) * g * g
        dx = -np.sqrt(ex + eps) / np.sqrt(eg + eps) * g
        ex *= rho
        ex += (1 - rho) * dx * dx
        p += dx.astype(p.dtype, copy=False)
    return params, state
