"""Finite-difference verification of analytic gradients.

Everything runs in float64: central differences with step h=1e-5 lose about
half the mantissa, which still leaves plenty of headroom for a 1e-4 relative
comparison, whereas float32 would drown the signal in rounding noise.
"""

from __future__ import annotations

from typing import Callable, Sequence, Union

import numpy as np

from .tensor import Parameter, Tensor4, backward, zero_grad

Leaf = Union[Tensor4, Parameter]


def numeric_grad(
    fn: Callable[[], Tensor4],
    leaf: Leaf,
    h: float = 1e-5,
) -> np.ndarray:
    """Central-difference gradient of a scalar-valued closure w.r.t. one leaf.

    The closure must re-run the forward pass from current leaf values; the
    leaf is perturbed in place one element at a time and restored afterward.
    """
    buf = leaf.value if isinstance(leaf, Parameter) else leaf.data
    if buf.dtype != np.float64:
        raise ValueError(f"numeric_grad needs float64 leaves, got {buf.dtype}")
    grad = np.zeros_like(buf)
    flat = buf.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = fn().item()
        flat[i] = keep - h
        fm = fn().item()
        flat[i] = keep
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def analytic_grad(fn: Callable[[], Tensor4], leaf: Leaf) -> np.ndarray:
    """Backprop gradient of a scalar-valued closure w.r.t. one leaf."""
    if isinstance(leaf, Parameter):
        zero_grad([leaf])
    else:
        leaf.requires_grad = True
        leaf.grad = None
    loss = fn()
    backward(loss)
    g = leaf.grad
    if g is None:
        raise RuntimeError(f"no gradient reached leaf {leaf!r}")
    return g.copy()


def max_rel_error(
    fn: Callable[[], Tensor4],
    leaves: Sequence[Leaf],
    h: float = 1e-5,
    floor: float = 1e-7,
) -> float:
    """Worst elementwise relative error between analytic and numeric grads.

    The floor keeps near-zero entries from inflating the ratio: error is
    |a - n| / max(|a|, |n|, floor).
    """
    worst = 0.0
    for leaf in leaves:
        a = analytic_grad(fn, leaf)
        n = numeric_grad(fn, leaf, h=h)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
