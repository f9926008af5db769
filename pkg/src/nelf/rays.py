"""Camera rays, stratified point sampling, and positional ray encoding.

A pinhole camera with a single focal length and centered principal point
shoots one ray per pixel.  Image space is y-down; camera space is y-up with
the camera looking along -z; pixel centers sit at +0.5.  Each ray gets K
points in [near, far], every point coordinate is lifted through a sin/cos
frequency expansion, and the result packs into the (1, 3K(2L+1), H, W)
tensor the light-field network consumes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import Tensor4

# fixed packing of the encoded tensor's channel axis, recorded in weight
# files so checkpoints are portable across implementations
CHANNEL_ORDER = "point-major;coordinate-minor;raw,sin(2^0 pi v),cos(2^0 pi v),...,sin(2^(L-1) pi v),cos(2^(L-1) pi v)"

WORLD_UP = np.array([0.0, 1.0, 0.0])


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera: image size in pixels and focal length in pixels."""

    width: int
    height: int
    focal: float

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not self.focal > 0:
            raise ValueError(f"focal length must be positive, got {self.focal}")


def downscale_intrinsics(intr: CameraIntrinsics, factor: int) -> CameraIntrinsics:
    """Shrink resolution and focal length together by an integer factor."""
    if factor < 1:
        raise ValueError(f"downscale factor must be >= 1, got {factor}")
    if intr.width % factor or intr.height % factor:
        raise ValueError(
            f"image size {intr.width}x{intr.height} not divisible by factor {factor}"
        )
    return CameraIntrinsics(intr.width // factor, intr.height // factor, intr.focal / factor)


def rotation_defect(rot: np.ndarray) -> float:
    """Max absolute deviation of R^T R from the identity."""
    rot = np.asarray(rot, dtype=np.float64)
    return float(np.max(np.abs(rot.T @ rot - np.eye(3))))


def nearest_rotation(rot: np.ndarray) -> np.ndarray:
    """Closest proper rotation in the Frobenius sense, via SVD."""
    u, _, vt = np.linalg.svd(np.asarray(rot, dtype=np.float64))
    r = u @ vt
    if np.linalg.det(r) < 0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


@dataclass(frozen=True)
class Pose:
    """Camera-to-world transform as a 3x4 [R|t] matrix.

    The rotation block must be a proper rotation (orthonormal, det +1)
    within 1e-5; wire inputs that drift further should be projected with
    nearest_rotation before constructing a Pose.
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 4):
            raise ValueError(f"pose matrix must be 3x4, got shape {m.shape}")
        object.__setattr__(self, "matrix", m)
        if rotation_defect(m[:, :3]) > 1e-5:
            raise ValueError("pose rotation is not orthonormal within 1e-5")
        if np.linalg.det(m[:, :3]) < 0:
            raise ValueError("pose rotation must have determinant +1")

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:, :3]

    @property
    def origin(self) -> np.ndarray:
        return self.matrix[:, 3]

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.hstack([np.eye(3), np.zeros((3, 1))]))


def look_at_pose(eye, target, up=WORLD_UP) -> Pose:
    """Camera at eye looking toward target, -z forward, y roughly up."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("look_at_pose: eye and target coincide")
    forward = forward / norm
    right = np.cross(forward, up)
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-12:
        raise ValueError("look_at_pose: view direction parallel to the up vector")
    right = right / rnorm
    true_up = np.cross(right, forward)
    rot = np.stack([right, true_up, -forward], axis=1)
    return Pose(np.hstack([rot, eye[:, None]]))


def orbit_pose(radius: float, azimuth: float, elevation: float, center=(0.0, 0.0, 0.0)) -> Pose:
    """Pose on a sphere around center, looking inward.

    azimuth rotates about +y (0 puts the camera on +z); elevation lifts
    toward +y.  Angles in radians.
    """
    if radius <= 0:
        raise ValueError(f"orbit radius must be positive, got {radius}")
    ce = np.cos(elevation)
    eye = np.asarray(center, dtype=np.float64) + radius * np.array(
        [np.sin(azimuth) * ce, np.sin(elevation), np.cos(azimuth) * ce]
    )
    return look_at_pose(eye, center)


def hemisphere_poses(
    n: int,
    radius: float,
    rng: np.random.Generator,
    elevation_range=(0.1, 1.2),
    center=(0.0, 0.0, 0.0),
):
    """n random inward-looking poses on an upper spherical cap."""
    lo, hi = elevation_range
    if not -np.pi / 2 < lo < hi < np.pi / 2:
        raise ValueError(f"bad elevation range {elevation_range}")
    poses = []
    for _ in range(n):
        az = rng.uniform(0.0, 2.0 * np.pi)
        el = rng.uniform(lo, hi)
        poses.append(orbit_pose(radius, az, el, center))
    return poses


@dataclass(frozen=True)
class RayGrid:
    """One ray per pixel: shared origin, unit world-space directions."""

    origins: Tensor4  # (1, 3, H, W), constant across pixels
    directions: Tensor4  # (1, 3, H, W), unit length
    near: float
    far: float

    def __post_init__(self):
        if not self.near < self.far:
            raise ValueError(f"need near < far, got {self.near} >= {self.far}")
        if self.origins.shape != self.directions.shape:
            raise ValueError("origin and direction grids must share a shape")
        norms = np.linalg.norm(self.directions.data, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-5:
            raise ValueError("ray directions must be unit length within 1e-5")

    @property
    def image_shape(self):
        _, _, h, w = self.directions.shape
        return h, w


def generate_ray_grid(
    intr: CameraIntrinsics, pose: Pose, near: float = 2.0, far: float = 6.0
) -> RayGrid:
    """World-space camera rays through every pixel center."""
    xs = (np.arange(intr.width, dtype=np.float64) + 0.5) - intr.width / 2.0
    ys = (np.arange(intr.height, dtype=np.float64) + 0.5) - intr.height / 2.0
    px, py = np.meshgrid(xs, ys)  # (H, W) each
    cam = np.stack(
        [px / intr.focal, -py / intr.focal, -np.ones_like(px)], axis=0
    )  # (3, H, W)
    cam /= np.linalg.norm(cam, axis=0, keepdims=True)
    world = np.tensordot(pose.rotation, cam, axes=([1], [0]))
    origins = np.broadcast_to(pose.origin[:, None, None], world.shape).copy()
    return RayGrid(
        origins=Tensor4(origins[None], dtype=np.float64),
        directions=Tensor4(world[None], dtype=np.float64),
        near=near,
        far=far,
    )


def sample_points(
    grid: RayGrid, k: int, mode: str, rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """Distances t_1 < ... < t_K per ray, shape (K, H, W).

    [near, far] splits into K equal bins; train mode draws one uniform
    sample per bin (stratified), test mode takes bin midpoints.
    """
    if k < 1:
        raise ValueError(f"need at least one sample point, got k={k}")
    if mode not in ("train", "test"):
        raise ValueError(f"sample mode must be 'train' or 'test', got {mode!r}")
    h, w = grid.image_shape
    delta = (grid.far - grid.near) / k
    lower = grid.near + delta * np.arange(k, dtype=np.float64)
    if mode == "test":
        mids = lower + 0.5 * delta
        return np.broadcast_to(mids[:, None, None], (k, h, w)).copy()
    if rng is None:
        raise ValueError("train-mode sampling needs an explicit random generator")
    return lower[:, None, None] + delta * rng.random((k, h, w))


def encoding_channels(k: int, l_bands: int) -> int:
    """Channel count of the packed encoding: 3K(2L+1)."""
    return 3 * k * (2 * l_bands + 1)


def positional_encode(value: float, l_bands: int) -> np.ndarray:
    """Lift one scalar to (v, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^{L-1} pi v), cos(2^{L-1} pi v))."""
    if l_bands < 0:
        raise ValueError(f"need l_bands >= 0, got {l_bands}")
    out = np.empty(2 * l_bands + 1)
    out[0] = value
    for j in range(l_bands):
        arg = (2.0**j) * np.pi * value
        out[1 + 2 * j] = np.sin(arg)
        out[2 + 2 * j] = np.cos(arg)
    return out


@dataclass(frozen=True)
class EncodedRayTensor:
    """Network-ready ray encoding plus the metadata needed to reproduce it."""

    tensor: Tensor4  # (1, 3K(2L+1), H, W)
    k: int
    l_bands: int
    near: float
    far: float
    mode: str

    def __post_init__(self):
        expected = encoding_channels(self.k, self.l_bands)
        if self.tensor.shape[1] != expected:
            raise ValueError(
                f"encoded tensor has {self.tensor.shape[1]} channels, expected {expected}"
            )


def encode_rays(
    grid: RayGrid,
    k: int,
    l_bands: int,
    mode: str = "test",
    rng: Optional[np.random.Generator] = None,
    dtype=np.float32,
) -> EncodedRayTensor:
    """Sample K points per ray and pack their encoded coordinates.

    Channel layout is point-major, coordinate-minor: channel index
    i*3*(2L+1) + a*(2L+1) + e addresses point i, coordinate a (x,y,z),
    encoding slot e (0 raw, then sin/cos pairs by rising frequency).
    """
    ts = sample_points(grid, k, mode, rng)  # (K, H, W)
    h, w = grid.image_shape
    o = grid.origins.data[0]  # (3, H, W)
    d = grid.directions.data[0]
    pts = o[None] + ts[:, None] * d[None]  # (K, 3, H, W)

    enc = np.empty((k, 3, 2 * l_bands + 1, h, w))
    enc[:, :, 0] = pts
    for j in range(l_bands):
        arg = (2.0**j) * np.pi * pts
        enc[:, :, 1 + 2 * j] = np.sin(arg)
        enc[:, :, 2 + 2 * j] = np.cos(arg)
    packed = enc.reshape(1, encoding_channels(k, l_bands), h, w).astype(dtype)
    return EncodedRayTensor(
        tensor=Tensor4(packed), k=k, l_bands=l_bands, near=grid.near, far=grid.far, mode=mode
    )
