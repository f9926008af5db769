"""On-disk scene datasets: teacher-rendered images plus camera poses.

Layout: a directory with manifest.json and 8-bit RGB PNGs.  The manifest
records the scene name, high-resolution intrinsics, the super-resolution
factor (the network sees rays at hi/factor resolution), near/far planes,
and one entry per sample: a 3x4 camera-to-world pose flattened row-major
and the image's relative path, tagged with its split.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
from PIL import Image

from .fields import RadianceField
from .rays import CameraIntrinsics, Pose, downscale_intrinsics, hemisphere_poses
from .volume import RenderSettings, render_image

SPLITS = ("pseudo", "real-train", "real-test")

PoseSampler = Callable[[int, np.random.Generator], Sequence[Pose]]


def default_pose_sampler(n: int, rng: np.random.Generator) -> Sequence[Pose]:
    """Inward-looking poses on the upper hemisphere at radius 4."""
    return hemisphere_poses(n, 4.0, rng)


def png_bytes(image: np.ndarray) -> bytes:
    """(3, H, W) floats in [0,1] -> encoded 8-bit RGB PNG bytes."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
    buf = io.BytesIO()
    Image.fromarray(u8, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_png(path: Path, image: np.ndarray) -> None:
    """(3, H, W) floats in [0,1] -> 8-bit RGB PNG."""
    Path(path).write_bytes(png_bytes(image))


def load_png(path: Path) -> np.ndarray:
    """8-bit RGB PNG -> (3, H, W) floats in [0,1]."""
    with Image.open(path) as im:
        u8 = np.asarray(im.convert("RGB"))
    return u8.transpose(2, 0, 1).astype(np.float64) / 255.0


@dataclass(frozen=True)
class SceneSample:
    pose: Pose
    image: str  # path relative to the dataset root
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}; expected one of {SPLITS}")


class SceneDataset:
    """A dataset directory bound to its parsed manifest."""

    def __init__(
        self,
        root: Path,
        scene: str,
        hi_intrinsics: CameraIntrinsics,
        sr_factor: int,
        near: float,
        far: float,
        samples: Optional[List[SceneSample]] = None,
    ):
        if not near < far:
            raise ValueError(f"need near < far, got {near} >= {far}")
        # fail early if the ray grid resolution would not be integral
        downscale_intrinsics(hi_intrinsics, sr_factor)
        self.root = Path(root)
        self.scene = scene
        self.hi_intrinsics = hi_intrinsics
        self.sr_factor = sr_factor
        self.near = near
        self.far = far
        self.samples: List[SceneSample] = list(samples or [])

    @property
    def lo_intrinsics(self) -> CameraIntrinsics:
        return downscale_intrinsics(self.hi_intrinsics, self.sr_factor)

    def indices(self, split: str) -> List[int]:
        return [i for i, s in enumerate(self.samples) if s.split == split]

    def load_image(self, index: int) -> np.ndarray:
        img = load_png(self.root / self.samples[index].image)
        hi = self.hi_intrinsics
        if img.shape != (3, hi.height, hi.width):
            raise ValueError(
                f"image {self.samples[index].image} has shape {img.shape[1:]}, "
                f"manifest says {hi.height}x{hi.width}"
            )
        return img

    def manifest_dict(self) -> dict:
        return {
            "scene": self.scene,
            "hi_intrinsics": {
                "width": self.hi_intrinsics.width,
                "height": self.hi_intrinsics.height,
                "focal": self.hi_intrinsics.focal,
            },
            "sr_factor": self.sr_factor,
            "near": self.near,
            "far": self.far,
            "samples": [
                {
                    "pose": [float(v) for v in s.pose.matrix.reshape(-1)],
                    "image": s.image,
                    "split": s.split,
                }
                for s in self.samples
            ],
        }

    def save_manifest(self) -> None:
        path = self.root / "manifest.json"
        path.write_text(json.dumps(self.manifest_dict(), indent=2, sort_keys=True) + "\n")

    @staticmethod
    def load(root) -> "SceneDataset":
        root = Path(root)
        try:
            raw = json.loads((root / "manifest.json").read_text())
        except FileNotFoundError:
            raise FileNotFoundError(f"no manifest.json under {root}") from None
        intr = raw["hi_intrinsics"]
        ds = SceneDataset(
            root=root,
            scene=raw["scene"],
            hi_intrinsics=CameraIntrinsics(intr["width"], intr["height"], intr["focal"]),
            sr_factor=int(raw["sr_factor"]),
            near=float(raw["near"]),
            far=float(raw["far"]),
        )
        for s in raw["samples"]:
            pose = Pose(np.asarray(s["pose"], dtype=np.float64).reshape(3, 4))
            ds.samples.append(SceneSample(pose=pose, image=s["image"], split=s["split"]))
        return ds


def generate_pseudo_dataset(
    field: RadianceField,
    n_images: int,
    hi_intrinsics: CameraIntrinsics,
    sr_factor: int,
    out_dir,
    scene_name: str = "custom",
    split: str = "pseudo",
    pose_sampler: PoseSampler = default_pose_sampler,
    settings: Optional[RenderSettings] = None,
    seed: int = 0,
) -> SceneDataset:
    """Render one teacher split to disk and return the updated dataset.

    Calling again with another split extends the same directory; the same
    (field, seed, settings) always reproduces the run byte for byte since
    teacher sampling uses fixed midpoints and poses come from a seeded
    generator.
    """
    if n_images < 1:
        raise ValueError(f"need at least one image, got {n_images}")
    settings = settings or RenderSettings()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest_path = out_dir / "manifest.json"
    if manifest_path.exists():
        ds = SceneDataset.load(out_dir)
        if [ds.hi_intrinsics.width, ds.hi_intrinsics.height] != [
            hi_intrinsics.width,
            hi_intrinsics.height,
        ] or ds.sr_factor != sr_factor:
            raise ValueError(f"dataset at {out_dir} was generated with different geometry")
        ds.samples = [s for s in ds.samples if s.split != split]  # regenerate this split
    else:
        ds = SceneDataset(
            root=out_dir,
            scene=scene_name,
            hi_intrinsics=hi_intrinsics,
            sr_factor=sr_factor,
            near=settings.near,
            far=settings.far,
        )

    rng = np.random.default_rng(seed)
    poses = pose_sampler(n_images, rng)
    for i, pose in enumerate(poses):
        img = render_image(field, hi_intrinsics, pose, settings)
        name = f"{split.replace('-', '_')}_{i:04d}.png"
        save_png(out_dir / name, img.data[0])
        ds.samples.append(SceneSample(pose=pose, image=name, split=split))
    ds.save_manifest()
    return ds
