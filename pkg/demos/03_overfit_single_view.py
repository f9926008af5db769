"""Memorize a single teacher view: the fastest end-to-end sanity loop.

A small model, one image, a few thousand steps. If this cannot reach
35+ dB something upstream (encoding, gradients, optimizer) is broken.
Takes about half a minute.

Run:  python3 demos/03_overfit_single_view.py
"""

import tempfile
from pathlib import Path

from nelf.dataset import generate_pseudo_dataset
from nelf.fields import make_scene
from nelf.network import NetConfig, SRStageSpec, build_model
from nelf.rays import CameraIntrinsics, encoding_channels
from nelf.train import TrainConfig, evaluate, train_stage

work = Path(tempfile.mkdtemp(prefix="overfit_"))
ds = generate_pseudo_dataset(
    make_scene("sphere"), 1, CameraIntrinsics(16, 16, 20.0), 2, work / "data",
    split="pseudo", seed=0,
)
print(f"dataset: 1 image at 16x16, rays at 8x8, in {ds.root}")

k = l = 4
net = NetConfig(
    in_channels=encoding_channels(k, l),
    width=32,
    n_res_blocks=2,
    sr_plan=(SRStageSpec(2, 16),),
)
model = build_model(net, seed=0)
cfg = TrainConfig(iterations=2000, batch_size=1, lr=3e-3, k_points=k, l_bands=l,
                  checkpoint_every=500)

print("training 2000 iterations...")
res = train_stage(model, ds, cfg, work / "run", stage="pseudo",
                  log=lambda s: print(" ", s))
quality = evaluate(model, ds, "pseudo", cfg, max_images=1)
print(f"loss {res.losses[0]:.4f} -> {res.final_loss:.6f}")
print(f"train-view PSNR: {quality['psnr']:.2f} dB (memorization succeeded above 35)")
