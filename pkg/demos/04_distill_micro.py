"""A complete miniature distillation: teacher data, two stages, report.

Everything the full pipeline does, at postage-stamp scale (about a
minute): render pseudo and held-out splits with the volumetric teacher,
train the student on pseudo data, fine-tune on the real-train split, and
evaluate on views neither stage saw.

Run:  python3 demos/04_distill_micro.py
"""

import json
import tempfile
from pathlib import Path

from nelf.train import DistillConfig, TrainConfig, distill_scene

work = Path(tempfile.mkdtemp(prefix="distill_"))
cfg = DistillConfig(
    scene="sphere",
    preset="tiny",
    hi_width=32,
    hi_height=32,
    focal=40.0,
    n_pseudo=12,
    n_real_train=4,
    n_real_test=3,
    teacher_samples=64,
    stage1=TrainConfig(iterations=300, batch_size=2, lr=2e-3, checkpoint_every=100),
    stage2=TrainConfig(iterations=100, batch_size=2, lr=2e-4, checkpoint_every=100),
)
report = distill_scene(cfg, work / "run", log=lambda s: print(" ", s))

print("\nreport.json:")
print(json.dumps({k: report[k] for k in ("param_count", "stage1", "stage2")}, indent=2))
print(f"\nweights: {work / 'run' / 'final.nlf'}")
print("(quality at this scale is rough; the point is the moving parts)")
