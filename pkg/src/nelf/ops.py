"""Differentiable layer ops on (B, C, H, W) tensors.

The op set is exactly what the light-field network needs: channel-mixing
1x1 convolution, the two upsampling transposed convolutions (2x via k=4 and
3x via k=3), batch normalization, GeLU/ReLU/sigmoid activations, residual
addition, and an MSE loss.  Each op validates shapes up front and registers
a backward closure on the output node.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
from scipy.special import erf

from .tensor import (
    ArrayLike,
    Parameter,
    ShapeError,
    Tensor4,
    grad_enabled,
    make_node,
    param_value,
)

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

# supported transposed-conv geometries: kernel -> (stride, padding)
_TRANSPOSE_GEOMETRY = {4: (2, 1), 3: (3, 0)}


def _needs_grad(*sources) -> bool:
    for s in sources:
        if isinstance(s, Parameter):
            return True
        if isinstance(s, Tensor4) and s.requires_grad:
            return True
    return False


def _accumulate(p: ArrayLike, delta: np.ndarray) -> None:
    if isinstance(p, Parameter):
        p.accumulate(delta)


def conv1x1(x: Tensor4, weight: ArrayLike, bias: ArrayLike) -> Tensor4:
    """Per-pixel channel mix: out[b,o,h,w] = bias[o] + sum_i w[o,i] x[b,i,h,w].

    Runs as one batched GEMM over the B*H*W pixel columns.
    """
    wv = param_value(weight)
    bv = param_value(bias)
    B, C, H, W = x.shape
    if wv.ndim != 2:
        raise ShapeError(f"conv1x1 weight must be rank-2 (Cout,Cin), got shape {wv.shape}")
    if bv.ndim != 1 or bv.shape[0] != wv.shape[0]:
        raise ShapeError(f"conv1x1 bias shape {bv.shape} does not match Cout={wv.shape[0]}")
    if wv.shape[1] != C:
        raise ShapeError(f"conv1x1 expects {wv.shape[1]} input channels, got {C}")
    O = wv.shape[0]

    xcols = x.data.reshape(B, C, H * W)
    out = np.matmul(wv[None, :, :], xcols).reshape(B, O, H, W)
    out += bv[None, :, None, None]

    def grad_fn(g: np.ndarray):
        gcols = g.reshape(B, O, H * W)
        _accumulate(weight, np.matmul(gcols, xcols.transpose(0, 2, 1)).sum(axis=0))
        _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return (None,)
        gx = np.matmul(wv.T[None, :, :], gcols).reshape(B, C, H, W)
        return (gx,)

    return make_node(out, (x,), grad_fn, _needs_grad(x, weight, bias))


def _tap_ranges(n_in: int, n_out: int, k: int, stride: int, pad: int):
    """Valid input range and first output index for each kernel tap.

    Output index of input i under tap t is i*stride - pad + t; taps that fall
    entirely outside [0, n_out) yield an empty range.
    """
    ranges = []
    for t in range(k):
        lo = max(0, -(-(pad - t) // stride))  # ceil((pad-t)/stride)
        hi = min(n_in - 1, (n_out - 1 + pad - t) // stride)
        start = lo * stride - pad + t
        ranges.append((lo, hi + 1, start))
    return ranges


def conv_transpose2d(
    x: Tensor4,
    weight: ArrayLike,
    bias: ArrayLike,
    stride: int,
    padding: int,
) -> Tensor4:
    """Transposed convolution for exact 2x (k=4, s=2, p=1) or 3x (k=3, s=3, p=0) upsampling."""
    wv = param_value(weight)
    bv = param_value(bias)
    if wv.ndim != 4 or wv.shape[2] != wv.shape[3]:
        raise ShapeError(f"conv_transpose2d weight must be (Cin,Cout,k,k), got shape {wv.shape}")
    k = wv.shape[2]
    if k not in _TRANSPOSE_GEOMETRY or _TRANSPOSE_GEOMETRY[k] != (stride, padding):
        raise ShapeError(
            f"unsupported transposed-conv geometry (k={k}, stride={stride}, padding={padding}); "
            f"supported: k=4/s=2/p=1 and k=3/s=3/p=0"
        )
    B, C, H, W = x.shape
    if wv.shape[0] != C:
        raise ShapeError(f"conv_transpose2d expects {wv.shape[0]} input channels, got {C}")
    O = wv.shape[1]
    if bv.ndim != 1 or bv.shape[0] != O:
        raise ShapeError(f"conv_transpose2d bias shape {bv.shape} does not match Cout={O}")
    Ho = (H - 1) * stride - 2 * padding + k
    Wo = (W - 1) * stride - 2 * padding + k

    h_taps = _tap_ranges(H, Ho, k, stride, padding)
    w_taps = _tap_ranges(W, Wo, k, stride, padding)
    xcols = x.data.reshape(B, C, H * W)

    # per-tap channel-mix GEMM, scattered to that tap's (strided) output cells;
    # keeps temporaries at input size instead of materializing all k*k taps
    out = np.zeros((B, O, Ho, Wo), dtype=x.data.dtype)
    for kh, (h0, h1, oh) in enumerate(h_taps):
        if h1 <= h0:
            continue
        for kw, (w0, w1, ow) in enumerate(w_taps):
            if w1 <= w0:
                continue
            tap = np.matmul(wv[:, :, kh, kw].T[None], xcols).reshape(B, O, H, W)
            out[
                :, :, oh : oh + (h1 - h0) * stride : stride, ow : ow + (w1 - w0) * stride : stride
            ] += tap[:, :, h0:h1, w0:w1]
    out += bv[None, :, None, None]

    def grad_fn(g: np.ndarray):
        _accumulate(bias, g.sum(axis=(0, 2, 3)))
        want_gx = x.requires_grad
        gx = np.zeros_like(x.data) if want_gx else None
        gw = np.zeros_like(wv) if isinstance(weight, Parameter) else None
        for kh, (h0, h1, oh) in enumerate(h_taps):
            if h1 <= h0:
                continue
            for kw, (w0, w1, ow) in enumerate(w_taps):
                if w1 <= w0:
                    continue
                gtap = g[
                    :, :, oh : oh + (h1 - h0) * stride : stride, ow : ow + (w1 - w0) * stride : stride
                ]
                gcols = np.ascontiguousarray(gtap).reshape(B, O, -1)
                if want_gx:
                    gslab = np.matmul(wv[:, :, kh, kw][None], gcols)
                    gx[:, :, h0:h1, w0:w1] += gslab.reshape(B, C, h1 - h0, w1 - w0)
                if gw is not None:
                    xt = x.data[:, :, h0:h1, w0:w1].reshape(B, C, -1)
                    gw[:, :, kh, kw] = np.matmul(xt, gcols.transpose(0, 2, 1)).sum(axis=0)
        if gw is not None:
            _accumulate(weight, gw)
        return (gx,)

    return make_node(out, (x,), grad_fn, _needs_grad(x, weight, bias))


def batchnorm2d(
    x: Tensor4,
    scale: ArrayLike,
    shift: ArrayLike,
    running_mean: Optional[np.ndarray],
    running_var: Optional[np.ndarray],
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor4:
    """Per-channel normalization over the (B, H, W) axes.

    Train mode normalizes with batch statistics and folds them into the
    running estimates in place (exponential moving average, biased variance);
    eval mode normalizes with the running estimates and requires them to
    exist.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm2d mode must be 'train' or 'eval', got {mode!r}")
    if eps <= 0:
        raise ValueError(f"batchnorm2d eps must be positive, got {eps}")
    sv = param_value(scale)
    bv = param_value(shift)
    B, C, H, W = x.shape
    if sv.shape != (C,) or bv.shape != (C,):
        raise ShapeError(
            f"batchnorm2d scale/shift must have shape ({C},), got {sv.shape} and {bv.shape}"
        )

    if mode == "train":
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
        if running_var is not None:
            running_var *= 1.0 - momentum
            running_var += momentum * var
    else:
        if running_mean is None or running_var is None:
            raise ValueError("batchnorm2d eval mode needs initialized running statistics")
        mu = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = sv[None, :, None, None] * xhat + bv[None, :, None, None]

    n = B * H * W

    def grad_fn(g: np.ndarray):
        _accumulate(shift, g.sum(axis=(0, 2, 3)))
        _accumulate(scale, (g * xhat).sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return (None,)
        gs = g * sv[None, :, None, None]
        if mode == "eval":
            return (gs * inv_std[None, :, None, None],)
        mean_g = gs.mean(axis=(0, 2, 3))
        mean_gx = (gs * xhat).sum(axis=(0, 2, 3)) / n
        gx = inv_std[None, :, None, None] * (
            gs - mean_g[None, :, None, None] - xhat * mean_gx[None, :, None, None]
        )
        return (gx,)

    return make_node(out, (x,), grad_fn, _needs_grad(x, scale, shift))


def gelu(x: Tensor4) -> Tensor4:
    """Exact Gaussian-error-linear unit x * Phi(x) (erf form, no tanh approximation)."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def grad_fn(g: np.ndarray):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return make_node(out, (x,), grad_fn, _needs_grad(x))


def relu(x: Tensor4) -> Tensor4:
    out = np.maximum(x.data, 0.0)

    def grad_fn(g: np.ndarray):
        return (g * (x.data > 0.0),)

    return make_node(out, (x,), grad_fn, _needs_grad(x))


def sigmoid(x: Tensor4) -> Tensor4:
    """Numerically stable logistic function; outputs lie in (0, 1)."""
    out = _sigmoid_array(x.data)

    def grad_fn(g: np.ndarray):
        return (g * out * (1.0 - out),)

    return make_node(out, (x,), grad_fn, _needs_grad(x))


def _sigmoid_array(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def residual_add(a: Tensor4, b: Tensor4) -> Tensor4:
    if a.shape != b.shape:
        raise ShapeError(f"residual_add shapes differ: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def grad_fn(g: np.ndarray):
        return (g, g)

    return make_node(out, (a, b), grad_fn, _needs_grad(a, b))


def mse_loss(pred: Tensor4, target) -> Tensor4:
    """Mean squared error as a (1,1,1,1) scalar node."""
    tdata = target.data if isinstance(target, Tensor4) else np.asarray(target, dtype=pred.dtype)
    if tdata.shape != pred.data.shape:
        raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {tdata.shape}")
    diff = pred.data - tdata
    n = diff.size
    out = np.array(np.mean(diff * diff), dtype=pred.dtype).reshape(1, 1, 1, 1)

    parents: Tuple[Tensor4, ...]
    if isinstance(target, Tensor4):
        parents = (pred, target)

        def grad_fn(g: np.ndarray):
            base = (2.0 / n) * float(g.reshape(())) * diff
            return (base, -base)

    else:
        parents = (pred,)

        def grad_fn(g: np.ndarray):
            return ((2.0 / n) * float(g.reshape(())) * diff,)

    return make_node(out, parents, grad_fn, _needs_grad(pred, target))
