"""Analytic radiance fields used as rendering teachers.

Each field maps batches of world points and unit view directions to
(density per unit length, RGB radiance).  Analytic scenes give exact,
fast ground truth: the renderer integrating them is the same code a
learned density field would plug into.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Protocol, Tuple

import numpy as np


class RadianceField(Protocol):
    def query(self, points: np.ndarray, directions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(M,3) points and unit directions -> ((M,) density >= 0, (M,3) rgb in [0,1])."""
        ...


def _check_query_args(points, directions):
    p = np.asarray(points, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3 or p.shape != d.shape:
        raise ValueError(f"field query needs matching (M,3) arrays, got {p.shape} and {d.shape}")
    return p, d


@dataclass(frozen=True)
class UniformSlab:
    """Constant-density, constant-color medium between two z planes."""

    sigma: float = 0.5
    color: Tuple[float, float, float] = (0.8, 0.6, 0.2)
    z_min: float = -6.0
    z_max: float = -2.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"density must be nonnegative, got {self.sigma}")
        if not self.z_min < self.z_max:
            raise ValueError(f"need z_min < z_max, got [{self.z_min}, {self.z_max}]")

    def query(self, points, directions):
        p, _ = _check_query_args(points, directions)
        inside = (p[:, 2] >= self.z_min) & (p[:, 2] <= self.z_max)
        sigma = np.where(inside, self.sigma, 0.0)
        rgb = np.broadcast_to(np.asarray(self.color, dtype=np.float64), (p.shape[0], 3)).copy()
        return sigma, rgb


@dataclass(frozen=True)
class EmissiveSphere:
    """Solid sphere whose radiance shifts with the angle between the local
    outward normal and the viewing direction.

    Color depends only on that angle, so a camera on any axis through the
    center sees a rotationally symmetric image.
    """

    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 1.0
    sigma: float = 5.0
    color_face: Tuple[float, float, float] = (0.9, 0.7, 0.2)
    color_grazing: Tuple[float, float, float] = (0.1, 0.2, 0.7)

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if self.sigma < 0:
            raise ValueError(f"density must be nonnegative, got {self.sigma}")

    def query(self, points, directions):
        p, d = _check_query_args(points, directions)
        rel = p - np.asarray(self.center, dtype=np.float64)
        dist = np.linalg.norm(rel, axis=1)
        sigma = np.where(dist <= self.radius, self.sigma, 0.0)
        # outward normal; the exact center has no normal, use +z there
        safe = np.maximum(dist, 1e-12)[:, None]
        normal = rel / safe
        normal[dist < 1e-12] = [0.0, 0.0, 1.0]
        # facing = 1 where the surface faces the viewer (n antiparallel to d)
        facing = 0.5 * (1.0 - np.einsum("ij,ij->i", normal, d))
        ca = np.asarray(self.color_face, dtype=np.float64)
        cb = np.asarray(self.color_grazing, dtype=np.float64)
        rgb = cb[None, :] + facing[:, None] * (ca - cb)[None, :]
        return sigma, np.clip(rgb, 0.0, 1.0)


@dataclass(frozen=True)
class CheckerSphere:
    """Sphere carrying a smooth 3D checker pattern, with a soft density
    edge so renders have learnable (band-limited) structure.
    """

    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 1.3
    sigma: float = 6.0
    frequency: float = 3.0
    edge_width: float = 0.25
    color_a: Tuple[float, float, float] = (0.9, 0.25, 0.15)
    color_b: Tuple[float, float, float] = (0.15, 0.35, 0.9)

    def __post_init__(self):
        if self.radius <= 0 or self.edge_width <= 0 or self.frequency <= 0:
            raise ValueError("radius, edge_width and frequency must be positive")
        if self.sigma < 0:
            raise ValueError(f"density must be nonnegative, got {self.sigma}")

    def query(self, points, directions):
        p, _ = _check_query_args(points, directions)
        rel = p - np.asarray(self.center, dtype=np.float64)
        dist = np.linalg.norm(rel, axis=1)
        # density ramps from 0 at the surface to full over edge_width
        sigma = self.sigma * np.clip((self.radius - dist) / self.edge_width, 0.0, 1.0)
        f = self.frequency
        checker = np.sin(f * rel[:, 0]) * np.sin(f * rel[:, 1]) * np.sin(f * rel[:, 2])
        mix = 0.5 * (1.0 + np.tanh(3.0 * checker) / np.tanh(3.0))
        ca = np.asarray(self.color_a, dtype=np.float64)
        cb = np.asarray(self.color_b, dtype=np.float64)
        rgb = ca[None, :] + mix[:, None] * (cb - ca)[None, :]
        return sigma, np.clip(rgb, 0.0, 1.0)


@dataclass(frozen=True)
class TransformedField:
    """Rigidly moved view of another field: the scene rotated by R and
    shifted by t, queried by pulling points back into the base frame.
    """

    base: RadianceField
    rotation: np.ndarray = dc_field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rigid transform needs a 3x3 rotation and a 3-vector translation")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-8:
            raise ValueError("rotation must be orthonormal")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def query(self, points, directions):
        p, d = _check_query_args(points, directions)
        back_p = (p - self.translation) @ self.rotation  # R^T rows applied
        back_d = d @ self.rotation
        return self.base.query(back_p, back_d)


NAMED_SCENES = {
    "slab": UniformSlab,
    "sphere": EmissiveSphere,
    "checker": CheckerSphere,
}


def make_scene(name: str) -> RadianceField:
    """Instantiate a named analytic scene with its default layout."""
    try:
        return NAMED_SCENES[name]()
    except KeyError:
        raise ValueError(f"unknown scene {name!r}; choose from {sorted(NAMED_SCENES)}") from None
