"""Volumetric ray-marching renderer (the distillation teacher).

Front-to-back alpha compositing over N quadrature samples per ray:

    out = sum_i T_i * (1 - exp(-sigma_i * delta_i)) * c_i  +  T_{N+1} * background
    T_i  = exp(-sum_{j<i} sigma_j * delta_j)

with delta_i the distance to the next sample and the final interval
stretching to the far plane.  The compositing core is a standalone
function so its conservation properties can be tested on arbitrary
density sequences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .fields import RadianceField
from .rays import CameraIntrinsics, Pose, generate_ray_grid
from .tensor import Tensor4

_CHUNK_RAYS = 4096


@dataclass(frozen=True)
class RenderSettings:
    """Quadrature and framing parameters for the teacher renderer."""

    n_samples: int = 256
    near: float = 2.0
    far: float = 6.0
    background: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    stratified: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError(f"need at least one sample per ray, got {self.n_samples}")
        if not self.near < self.far:
            raise ValueError(f"need near < far, got {self.near} >= {self.far}")


def composite(sigma: np.ndarray, delta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample compositing weights and the residual transmittance.

    sigma, delta: (..., N) nonnegative.  Returns weights (..., N) and the
    transmittance left after the last sample (...,); weights sum with the
    residual to 1 (light is either absorbed at some sample or survives).
    """
    if sigma.shape != delta.shape:
        raise ValueError(f"sigma/delta shapes differ: {sigma.shape} vs {delta.shape}")
    tau = sigma * delta
    accum = np.cumsum(tau, axis=-1)
    trans = np.exp(-(accum - tau))  # T_i, exclusive prefix
    alpha = -np.expm1(-tau)  # 1 - exp(-tau) without cancellation
    weights = trans * alpha
    residual = np.exp(-accum[..., -1])
    return weights, residual


def _sample_distances(
    n_rays: int, settings: RenderSettings, rng: Optional[np.random.Generator]
) -> np.ndarray:
    n = settings.n_samples
    width = (settings.far - settings.near) / n
    lower = settings.near + width * np.arange(n, dtype=np.float64)
    if not settings.stratified:
        return np.broadcast_to(lower + 0.5 * width, (n_rays, n)).copy()
    if rng is None:
        rng = np.random.default_rng(settings.seed)
    return lower[None, :] + width * rng.random((n_rays, n))


def render_rays(
    field: RadianceField,
    origins: np.ndarray,
    directions: np.ndarray,
    settings: RenderSettings,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Composite a batch of rays: (M,3) origins/unit directions -> (M,3) rgb."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    if o.ndim != 2 or o.shape[1] != 3 or o.shape != d.shape:
        raise ValueError(f"render_rays needs matching (M,3) arrays, got {o.shape} and {d.shape}")
    m = o.shape[0]
    n = settings.n_samples
    ts = _sample_distances(m, settings, rng)  # (M, N)
    delta = np.empty_like(ts)
    delta[:, :-1] = np.diff(ts, axis=1)
    delta[:, -1] = settings.far - ts[:, -1]

    pts = o[:, None, :] + ts[:, :, None] * d[:, None, :]  # (M, N, 3)
    dirs = np.broadcast_to(d[:, None, :], pts.shape)
    sigma, rgb = field.query(pts.reshape(-1, 3), dirs.reshape(-1, 3))
    sigma = sigma.reshape(m, n)
    rgb = rgb.reshape(m, n, 3)

    weights, residual = composite(sigma, delta)
    bg = np.asarray(settings.background, dtype=np.float64)
    out = (weights[:, :, None] * rgb).sum(axis=1) + residual[:, None] * bg[None, :]
    return np.clip(out, 0.0, 1.0)


def render_ray(
    field: RadianceField,
    origin,
    direction,
    settings: RenderSettings,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Single-ray convenience wrapper; direction must be unit length."""
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-5:
        raise ValueError("render_ray needs a unit direction")
    return render_rays(field, np.asarray(origin, dtype=np.float64)[None], d[None], settings, rng)[0]


def render_image(
    field: RadianceField,
    intrinsics: CameraIntrinsics,
    pose: Pose,
    settings: RenderSettings,
    rng: Optional[np.random.Generator] = None,
) -> Tensor4:
    """Render one full frame, chunking rays to bound working memory."""
    grid = generate_ray_grid(intrinsics, pose, settings.near, settings.far)
    h, w = grid.image_shape
    o = grid.origins.data[0].reshape(3, -1).T  # (H*W, 3)
    d = grid.directions.data[0].reshape(3, -1).T
    out = np.empty((h * w, 3))
    if settings.stratified and rng is None:
        rng = np.random.default_rng(settings.seed)
    for start in range(0, h * w, _CHUNK_RAYS):
        stop = min(start + _CHUNK_RAYS, h * w)
        out[start:stop] = render_rays(field, o[start:stop], d[start:stop], settings, rng)
    return Tensor4(out.T.reshape(1, 3, h, w), dtype=np.float64)
