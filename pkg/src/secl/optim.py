"""Bias-corrected Adam over named parameter dictionaries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def _moments(self, name, param_data):
        if name not in self.m:
            self.m[name] = np.zeros_like(param_data)
            self.v[name] = np.zeros_like(param_data)
        return self.m[name], self.v[name]


def adam_step(params, grads, state):
    """One Adam update, in place on `params` (name -> Tensor).

    `grads` maps the same names to gradient arrays. Returns the mutated
    (params, state) pair for convenience.
    """
    state.t += 1
    t = state.t
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} != param shape "
                             f"{p.data.shape} for '{name}'")
        m, v = state._moments(name, p.data)
        m += (1 - state.beta1) * (g - m)
        v += (1 - state.beta2) * (g * g - v)
        mhat = m / bc1
        vhat = v / bc2
        p.data = p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state
