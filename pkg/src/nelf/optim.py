"""Adam optimizer over named Parameter collections.

Moment buffers live in a plain dataclass keyed by parameter name so they can
be serialized alongside checkpoints and restored bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Sequence

import numpy as np

from .tensor import Parameter


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Sequence[Parameter],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Apply one bias-corrected Adam update in place using each parameter's
    accumulated gradient.

    Gradients are not cleared here; call zero_grad between iterations.
    """
    if lr <= 0:
        raise ValueError(f"adam_step lr must be positive, got {lr}")
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ValueError("adam_step requires unique parameter names")

    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for p in params:
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        v = state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.value -= lr * mhat / (np.sqrt(vhat) + eps)
