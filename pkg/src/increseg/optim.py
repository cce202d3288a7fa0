"""Adaptive-moment (Adam) parameter updates over named parameter maps.

Freeze masks are honored strictly: a parameter outside the mask is neither
moved nor has its moment state or step count advanced, so later unfreezing
resumes with unbiased corrections.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .segnet import FreezeMask


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 12

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                   state: AdamState, opt: OptimizerConfig,
                   trainable: FreezeMask | None = None):
    """One bias-corrected Adam step, in place. Returns (params, state)."""
    names = params.keys() if trainable is None else [
        n for n in params if n in trainable.trainable
    ]
    for name in names:
        g = grads[name]
        if g.shape != params[name].shape:
            raise ValueError(
                f"gradient shape {g.shape} != parameter shape "
                f"{params[name].shape} for {name}"
            )
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(
                f"non-finite gradient for parameter {name!r} "
                f"at step {state.t.get(name, 0) + 1}"
            )
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
            state.t[name] = 0
        state.t[name] += 1
        t = state.t[name]
        m = state.m[name]
        v = state.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * np.square(g)
        m_hat = m / (1.0 - opt.beta1 ** t)
        v_hat = v / (1.0 - opt.beta2 ** t)
        params[name] -= (opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)).astype(
            params[name].dtype, copy=False
        )
    return params, state
