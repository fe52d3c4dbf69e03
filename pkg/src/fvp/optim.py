"""Adam with bias correction, operating on lists of parameter arrays."""

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError


@dataclass
class AdamState:
    """First/second moment accumulators, one pair per parameter array."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params):
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])

    @property
    def param_count(self):
        return sum(m.size for m in self.m)


def adam_step(state, params, grads, lr, weight_decay=0.0):
    """One in-place Adam update; weight decay enters as an L2 gradient term."""
    if len(params) != len(state.m) or len(params) != len(grads):
        raise DomainError("parameter/gradient lists do not match optimizer state")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g_raw, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g_raw.shape:
            raise DomainError(f"gradient shape {g_raw.shape} != parameter shape {p.shape}")
        g = g_raw + weight_decay * p if weight_decay else g_raw
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params
