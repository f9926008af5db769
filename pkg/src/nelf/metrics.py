"""Image-quality metrics: PSNR and SSIM on [0,1] float images.

SSIM follows the original single-scale formulation: 11x11 Gaussian window
with sigma 1.5, stability constants K1=0.01 and K2=0.03 at dynamic range
1, computed per channel on the valid (fully overlapped) region and
averaged.
"""

from __future__ import annotations

from typing import Union

import numpy as np
from scipy.ndimage import correlate

from .tensor import Tensor4

PSNR_CAP_DB = 100.0

_WINDOW_SIZE = 11
_WINDOW_SIGMA = 1.5
_K1 = 0.01
_K2 = 0.03


def _as_image(x: Union[Tensor4, np.ndarray]) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor4) else np.asarray(x)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError(f"metrics take single images, got batch of {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim != 3:
        raise ValueError(f"expected a (3,H,W) or (1,3,H,W) image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    return np.asarray(arr, dtype=np.float64)


def _check_pair(pred, ref):
    p = _as_image(pred)
    r = _as_image(ref)
    if p.shape != r.shape:
        raise ValueError(f"image shapes differ: {p.shape} vs {r.shape}")
    return p, r


def psnr(pred, ref, quantize: bool = False) -> float:
    """Peak signal-to-noise ratio in dB; identical images hit the 100 dB cap.

    quantize=True rounds both images to 8-bit levels first, matching
    pipelines that evaluate on saved PNGs.
    """
    p, r = _check_pair(pred, ref)
    if quantize:
        p = np.round(p * 255.0) / 255.0
        r = np.round(r * 255.0) / 255.0
    mse = float(np.mean((p - r) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def gaussian_window(size: int = _WINDOW_SIZE, sigma: float = _WINDOW_SIGMA) -> np.ndarray:
    """Normalized 2D Gaussian tap grid."""
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(pred, ref) -> float:
    """Mean structural similarity over channels and valid window positions."""
    p, r = _check_pair(pred, ref)
    _, h, w = p.shape
    if h < _WINDOW_SIZE or w < _WINDOW_SIZE:
        raise ValueError(
            f"image {h}x{w} is smaller than the {_WINDOW_SIZE}x{_WINDOW_SIZE} SSIM window"
        )
    win = gaussian_window()
    c1 = (_K1 * 1.0) ** 2
    c2 = (_K2 * 1.0) ** 2
    half = _WINDOW_SIZE // 2
    crop = (slice(half, h - half), slice(half, w - half))

    vals = []
    for c in range(p.shape[0]):
        x, y = p[c], r[c]
        mu_x = correlate(x, win)[crop]
        mu_y = correlate(y, win)[crop]
        xx = correlate(x * x, win)[crop] - mu_x * mu_x
        yy = correlate(y * y, win)[crop] - mu_y * mu_y
        xy = correlate(x * y, win)[crop] - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))
