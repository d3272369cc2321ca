"""First-order optimizers over ``{name: ndarray}`` parameter dicts.

``step`` never mutates its inputs; it returns a fresh parameter dict. Moment
buffers live on the optimizer object.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DimensionError


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def _check(params, grads):
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            raise KeyError(f"missing gradient for {k!r}")
        if np.shape(g) != np.shape(p):
            raise DimensionError(f"{k}: param {np.shape(p)} vs grad {np.shape(g)}")


def optimizer_step(state: OptimizerState, params: dict, grads: dict) -> dict:
    _check(params, grads)
    state.step_count += 1
    if state.kind == "sgd":
        return {k: p - state.lr * grads[k] for k, p in params.items()}

    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    out = {}
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        else:
            v = state.v[k]
            if m.shape != p.shape:
                raise DimensionError(f"{k}: moment buffer {m.shape} vs param {p.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[k], state.v[k] = m, v
        out[k] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return out


def sgd(lr: float) -> OptimizerState:
    return OptimizerState(kind="sgd", lr=lr)


def adam(lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    return OptimizerState(kind="adam", lr=lr, beta1=beta1, beta2=beta2, eps=eps)
