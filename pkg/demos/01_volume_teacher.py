"""Render a scene with the volumetric teacher and inspect the compositing.

Run:  python3 demos/01_volume_teacher.py
"""

import numpy as np

from nelf.fields import make_scene
from nelf.rays import CameraIntrinsics, orbit_pose
from nelf.volume import RenderSettings, composite, render_image

# A sphere with a soft-edged checkerboard shell, viewed from an orbit pose.
field = make_scene("checker")
intr = CameraIntrinsics(64, 64, 80.0)
pose = orbit_pose(radius=4.0, azimuth=0.6, elevation=0.4)

settings = RenderSettings(n_samples=128)
image = render_image(field, intr, pose, settings)
print(f"rendered {image.shape} image, values in "
      f"[{image.data.min():.3f}, {image.data.max():.3f}]")

# The compositor turns per-sample densities into convex pixel weights:
# whatever opacity the samples don't claim falls through to the background.
sigma = np.array([[0.0, 2.0, 5.0, 0.5]])
delta = np.full((1, 4), 0.25)
weights, residual = composite(sigma, delta)
print("sample weights:", np.round(weights[0], 4))
print("background share:", round(float(residual[0]), 4))
print("total:", float(weights.sum() + residual))

import tempfile
from pathlib import Path

from nelf.dataset import save_png

out = Path(tempfile.mkdtemp(prefix="teacher_")) / "view.png"
save_png(out, image.data[0])
print(f"wrote {out}")
