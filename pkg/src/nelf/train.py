"""Two-stage distillation: fit the conv light-field model to teacher renders.

Stage "pseudo" trains on a large machine-generated split; stage "finetune"
continues from those weights on the held-out real-train split. Every
iteration draws its batch and its stratified ray samples from a generator
seeded by (seed, stage, iteration), so an interrupted run restarted from
the latest checkpoint replays the identical sequence.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .dataset import SceneDataset, generate_pseudo_dataset
from .fields import make_scene
from .metrics import psnr, ssim
from .network import Model, NetConfig, build_model, count_params, preset_config
from .optim import AdamState, adam_step
from .rays import CameraIntrinsics, encode_rays, encoding_channels, generate_ray_grid
from .tensor import Tensor4, no_grad, zero_grad
from .volume import RenderSettings
from .weights import load_into_model, load_moments, load_weights, save_moments, save_weights

STAGES = ("pseudo", "finetune")
_STAGE_SPLIT = {"pseudo": "pseudo", "finetune": "real-train"}
_STAGE_TAG = {"pseudo": 0, "finetune": 1}

_WEIGHTS_NAME = "ckpt.nlf"
_MOMENTS_NAME = "ckpt.moments.nlf"
_SIDECAR_NAME = "ckpt.json"

Logger = Optional[Callable[[str], None]]


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; the last checkpoint survives."""

    def __init__(self, message: str, checkpoint: Optional[Path] = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 20000
    batch_size: int = 2
    lr: float = 4e-3
    decay_steps: Optional[int] = None  # None: decay over the full schedule
    k_points: int = 8
    l_bands: int = 6
    seed: int = 0
    checkpoint_every: int = 1000
    eval_every: int = 0  # 0 disables mid-run evaluation
    eval_images: int = 8

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"need at least one iteration, got {self.iterations}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be positive, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.decay_steps is not None and self.decay_steps < 1:
            raise ValueError(f"decay_steps must be positive, got {self.decay_steps}")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be positive")
        if self.eval_every < 0 or self.eval_images < 1:
            raise ValueError("eval cadence must be >= 0 and eval_images positive")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(config: TrainConfig, iteration: int) -> float:
    """Exponential decay: a tenth of the base rate every decay_steps."""
    steps = config.decay_steps if config.decay_steps is not None else config.iterations
    return config.lr * 0.1 ** (iteration / steps)


def _iteration_rng(config: TrainConfig, stage: str, iteration: int) -> np.random.Generator:
    return np.random.default_rng((config.seed, _STAGE_TAG[stage], iteration))


def make_batch(
    dataset: SceneDataset,
    indices: Sequence[int],
    config: TrainConfig,
    mode: str = "train",
    rng: Optional[np.random.Generator] = None,
) -> Tuple[Tensor4, Tensor4]:
    """Encoded ray grids and matching target images for a set of samples."""
    if len(indices) == 0:
        raise ValueError("empty batch")
    encs, targets = [], []
    for idx in indices:
        sample = dataset.samples[idx]
        grid = generate_ray_grid(dataset.lo_intrinsics, sample.pose, dataset.near, dataset.far)
        enc = encode_rays(grid, config.k_points, config.l_bands, mode=mode, rng=rng)
        encs.append(enc.tensor.data)
        targets.append(dataset.load_image(idx))
    x = Tensor4(np.concatenate(encs, axis=0))
    y = Tensor4(np.stack(targets, axis=0).astype(np.float32))
    return x, y


def render_view(
    model: Model,
    intr: CameraIntrinsics,
    pose,
    near: float,
    far: float,
    k_points: int,
    l_bands: int,
) -> np.ndarray:
    """One deterministic eval-mode forward pass; returns a (3,H,W) image."""
    grid = generate_ray_grid(intr, pose, near, far)
    enc = encode_rays(grid, k_points, l_bands, mode="test")
    with no_grad():
        out = model.forward(enc.tensor, mode="eval")
    return out.data[0]


def evaluate(
    model: Model,
    dataset: SceneDataset,
    split: str,
    config: TrainConfig,
    max_images: Optional[int] = None,
    with_ssim: bool = False,
) -> Dict[str, float]:
    """Mean PSNR (and optionally SSIM) of eval-mode renders against a split."""
    idxs = dataset.indices(split)
    if not idxs:
        raise ValueError(f"split {split!r} is empty")
    if max_images is not None:
        idxs = idxs[:max_images]
    psnrs, ssims = [], []
    for idx in idxs:
        sample = dataset.samples[idx]
        img = render_view(
            model,
            dataset.lo_intrinsics,
            sample.pose,
            dataset.near,
            dataset.far,
            config.k_points,
            config.l_bands,
        )
        target = dataset.load_image(idx)
        psnrs.append(psnr(img, target))
        if with_ssim:
            ssims.append(ssim(img, target))
    out = {"psnr": float(np.mean(psnrs)), "n_images": len(idxs)}
    if with_ssim:
        out["ssim"] = float(np.mean(ssims))
    return out


def _config_hash(net: NetConfig, config: TrainConfig, stage: str) -> str:
    blob = json.dumps(
        {"net": net.to_dict(), "train": config.to_dict(), "stage": stage},
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _atomic_write(path: Path, writer: Callable[[Path], None]) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    writer(tmp)
    os.replace(tmp, path)


def save_checkpoint(
    model: Model,
    state: AdamState,
    out_dir: Path,
    iteration: int,
    stage: str,
    config: TrainConfig,
    ray: Optional[dict] = None,
) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(out_dir / _WEIGHTS_NAME, lambda p: save_weights(model, p, ray=ray))
    _atomic_write(out_dir / _MOMENTS_NAME, lambda p: save_moments(state, p))
    sidecar = {
        "iteration": iteration,
        "stage": stage,
        "seed": config.seed,
        "config_hash": _config_hash(model.config, config, stage),
        "weights": _WEIGHTS_NAME,
        "moments": _MOMENTS_NAME,
    }
    _atomic_write(
        out_dir / _SIDECAR_NAME,
        lambda p: p.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n"),
    )
    return out_dir / _SIDECAR_NAME


def load_checkpoint(
    model: Model, out_dir: Path, stage: str, config: TrainConfig
) -> Tuple[int, AdamState]:
    """Restore weights and optimizer state; returns (next_iteration, state)."""
    out_dir = Path(out_dir)
    sidecar = json.loads((out_dir / _SIDECAR_NAME).read_text())
    want = _config_hash(model.config, config, stage)
    if sidecar["config_hash"] != want:
        raise ValueError(
            "checkpoint was produced by a different configuration "
            f"({sidecar['config_hash']} != {want})"
        )
    load_into_model(model, load_weights(out_dir / sidecar["weights"]))
    state = load_moments(out_dir / sidecar["moments"])
    return int(sidecar["iteration"]), state


@dataclass
class StageResult:
    stage: str
    iterations_run: int
    final_loss: float
    losses: List[float] = field(default_factory=list)
    evals: List[dict] = field(default_factory=list)
    wall_s: float = 0.0


def train_stage(
    model: Model,
    dataset: SceneDataset,
    config: TrainConfig,
    out_dir,
    stage: str = "pseudo",
    resume: bool = False,
    ray: Optional[dict] = None,
    log: Logger = None,
) -> StageResult:
    """Run one optimization stage over its split, checkpointing as it goes."""
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")
    out_dir = Path(out_dir)
    split = _STAGE_SPLIT[stage]
    pool = dataset.indices(split)
    if not pool:
        raise ValueError(f"dataset has no {split!r} samples")

    start = 0
    state = AdamState()
    if resume:
        start, state = load_checkpoint(model, out_dir, stage, config)
        if log:
            log(f"[{stage}] resumed at iteration {start}")

    params = model.params()
    losses: List[float] = []
    evals: List[dict] = []
    t0 = time.monotonic()

    for it in range(start, config.iterations):
        rng = _iteration_rng(config, stage, it)
        take = min(config.batch_size, len(pool))
        indices = rng.choice(pool, size=take, replace=False)
        x, y = make_batch(dataset, indices, config, mode="train", rng=rng)

        zero_grad(params)
        out = model.forward(x, mode="train")
        loss = ops.mse_loss(out, y)
        value = float(loss.data.reshape(()))
        if not np.isfinite(value):
            ckpt = out_dir / _SIDECAR_NAME
            raise TrainingDiverged(
                f"loss became non-finite at iteration {it}",
                checkpoint=ckpt if ckpt.exists() else None,
            )
        loss.backward()
        adam_step(params, state, lr=lr_at(config, it))
        losses.append(value)

        done = it + 1
        if done % config.checkpoint_every == 0 or done == config.iterations:
            save_checkpoint(model, state, out_dir, done, stage, config, ray=ray)
        if config.eval_every and (done % config.eval_every == 0 or done == config.iterations):
            metrics = evaluate(model, dataset, "real-test", config, config.eval_images)
            evals.append({"iteration": done, **metrics})
            if log:
                log(f"[{stage}] iter {done}: loss {value:.5f}, psnr {metrics['psnr']:.2f} dB")
        elif log and done % max(1, config.checkpoint_every) == 0:
            log(f"[{stage}] iter {done}: loss {value:.5f}, lr {lr_at(config, it):.2e}")

    result = StageResult(
        stage=stage,
        iterations_run=config.iterations - start,
        final_loss=losses[-1] if losses else float("nan"),
        losses=losses,
        evals=evals,
        wall_s=time.monotonic() - t0,
    )
    (out_dir / "history.json").write_text(
        json.dumps(
            {
                "stage": stage,
                "losses": result.losses,
                "evals": result.evals,
                "wall_s": result.wall_s,
            },
            sort_keys=True,
        )
        + "\n"
    )
    return result


@dataclass(frozen=True)
class DistillConfig:
    """Everything one end-to-end teacher-to-student run needs."""

    scene: str = "checker"
    preset: str = "tiny"
    hi_width: int = 128
    hi_height: int = 128
    focal: float = 160.0
    n_pseudo: int = 200
    n_real_train: int = 32
    n_real_test: int = 8
    teacher_samples: int = 256
    near: float = 2.0
    far: float = 6.0
    seed: int = 0
    stage1: TrainConfig = field(default_factory=TrainConfig)
    # short and gentle: longer or hotter fine-tunes drift off the held-out set
    stage2: TrainConfig = field(
        default_factory=lambda: TrainConfig(iterations=500, lr=1e-4)
    )


def _distill_net_config(cfg: DistillConfig) -> NetConfig:
    net = preset_config(cfg.preset)
    c_in = encoding_channels(cfg.stage1.k_points, cfg.stage1.l_bands)
    if net.in_channels != c_in:
        net = replace(net, in_channels=c_in)
    return net


def distill_scene(cfg: DistillConfig, out_dir, log: Logger = None) -> dict:
    """Generate teacher data, train both stages, and report quality metrics."""
    if (cfg.stage2.k_points, cfg.stage2.l_bands) != (cfg.stage1.k_points, cfg.stage1.l_bands):
        raise ValueError("both stages must share the ray encoding (k_points, l_bands)")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    field_obj = make_scene(cfg.scene)
    net = _distill_net_config(cfg)
    sr = net.upsample_factor
    intr = CameraIntrinsics(cfg.hi_width, cfg.hi_height, cfg.focal)
    settings = RenderSettings(n_samples=cfg.teacher_samples, near=cfg.near, far=cfg.far)
    ray_meta = {
        "k": cfg.stage1.k_points,
        "l": cfg.stage1.l_bands,
        "near": cfg.near,
        "far": cfg.far,
        # serving-time camera: the low-res grid the model was trained on
        "width": cfg.hi_width // sr,
        "height": cfg.hi_height // sr,
        "focal": cfg.focal / sr,
    }

    report: dict = {
        "scene": cfg.scene,
        "preset": cfg.preset,
        "sr_factor": sr,
        "hi_resolution": [cfg.hi_height, cfg.hi_width],
        "config": asdict(cfg),
        "param_count": None,
        "phases": {},
    }

    t0 = time.monotonic()
    data_dir = out_dir / "data"
    counts = {
        "pseudo": cfg.n_pseudo,
        "real-train": cfg.n_real_train,
        "real-test": cfg.n_real_test,
    }
    dataset = None
    for i, (split, n) in enumerate(counts.items()):
        dataset = generate_pseudo_dataset(
            field_obj,
            n,
            intr,
            sr,
            data_dir,
            scene_name=cfg.scene,
            split=split,
            settings=settings,
            seed=cfg.seed * len(counts) + i,
        )
        if log:
            log(f"[teacher] rendered {n} {split} images")
    report["phases"]["teacher_s"] = time.monotonic() - t0

    model = build_model(net, seed=cfg.seed)
    report["param_count"] = count_params(model)

    s1 = train_stage(
        model, dataset, cfg.stage1, out_dir / "stage1", stage="pseudo", ray=ray_meta, log=log
    )
    report["phases"]["stage1_s"] = s1.wall_s
    t_eval = time.monotonic()
    e1 = evaluate(model, dataset, "real-test", cfg.stage1, with_ssim=True)
    report["stage1"] = {"final_loss": s1.final_loss, **e1}

    s2 = train_stage(
        model, dataset, cfg.stage2, out_dir / "stage2", stage="finetune", ray=ray_meta, log=log
    )
    report["phases"]["stage2_s"] = s2.wall_s
    e2 = evaluate(model, dataset, "real-test", cfg.stage2, with_ssim=True)
    report["stage2"] = {"final_loss": s2.final_loss, **e2}
    report["phases"]["eval_s"] = time.monotonic() - t_eval - s2.wall_s

    save_weights(model, out_dir / "final.nlf", ray=ray_meta)
    report["phases"]["total_s"] = time.monotonic() - t0
    report["weights"] = "final.nlf"
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if log:
        log(
            f"[done] stage1 {e1['psnr']:.2f} dB -> stage2 {e2['psnr']:.2f} dB, "
            f"{report['phases']['total_s']:.0f}s total"
        )
    return report
