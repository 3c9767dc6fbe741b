"""Adaptive-moment optimizer over dicts of named numpy arrays."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``.

    Inputs are not modified.
    """
    b1, b2 = betas
    t = state.t + 1
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1.0 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1.0 - b2) * (g * g)
        new_params[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v)


class Adam:
    """Stateful wrapper that updates leaf Tensors in place."""

    def __init__(self, tensors, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.tensors = dict(tensors)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = AdamState()

    def step(self, grads):
        params = {k: t.data for k, t in self.tensors.items()}
        new, self.state = adam_step(params, grads, self.state, self.lr, self.betas, self.eps)
        for k, t in self.tensors.items():
            t.data = new[k]
