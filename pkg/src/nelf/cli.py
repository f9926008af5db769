"""Command-line entry points for the full pipeline.

Subcommands: teacher (render a dataset split), train (one stage), distill
(both stages end to end), render (frames from weights), eval (metrics over
a split), bench (latency), serve (interactive render service). Every
command validates its flags fully before touching the filesystem.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .dataset import SPLITS, SceneDataset, generate_pseudo_dataset, save_png
from .fields import NAMED_SCENES, make_scene
from .metrics import psnr, ssim
from .network import PRESET_NAMES, build_model, count_params, fold_batchnorm, preset_config
from .rays import CameraIntrinsics, Pose, orbit_pose
from .train import (
    DistillConfig,
    TrainConfig,
    distill_scene,
    evaluate,
    render_view,
    train_stage,
)
from .volume import RenderSettings
from .weights import load_weights, model_from_weights, save_weights


def _progress(msg: str) -> None:
    # line-flushed so a supervisor tailing a pipe sees training progress live
    print(msg, flush=True)


def _parse_resolution(text: str):
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"resolution must look like 128x128, got {text!r}"
        ) from None


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _load_train_config(args, defaults: TrainConfig) -> TrainConfig:
    """Config file first, then explicit flags override field by field."""
    values = defaults.to_dict()
    if getattr(args, "config", None):
        path = Path(args.config)
        if path.suffix == ".toml":
            try:
                import tomllib  # py311+
            except ModuleNotFoundError:
                import tomli as tomllib
            raw = tomllib.loads(path.read_text())
        else:
            raw = json.loads(path.read_text())
        unknown = set(raw) - set(values)
        if unknown:
            raise SystemExit(f"unknown training config keys: {sorted(unknown)}")
        values.update(raw)
    for key in values:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return TrainConfig(**values)


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="TOML or JSON file with TrainConfig fields")
    p.add_argument("--iterations", type=_positive_int)
    p.add_argument("--batch-size", dest="batch_size", type=_positive_int)
    p.add_argument("--lr", type=float)
    p.add_argument("--decay-steps", dest="decay_steps", type=_positive_int)
    p.add_argument("--k-points", dest="k_points", type=_positive_int)
    p.add_argument("--l-bands", dest="l_bands", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=_positive_int)
    p.add_argument("--eval-every", dest="eval_every", type=int)


def cmd_teacher(args) -> int:
    width, height = args.resolution
    if width % args.sr_factor or height % args.sr_factor:
        raise SystemExit(
            f"--sr-factor {args.sr_factor} does not divide resolution {width}x{height}"
        )
    if not args.near < args.far:
        raise SystemExit(f"--near {args.near} must be below --far {args.far}")
    field = make_scene(args.scene)
    intr = CameraIntrinsics(width, height, args.focal)
    settings = RenderSettings(n_samples=args.samples, near=args.near, far=args.far)
    ds = generate_pseudo_dataset(
        field,
        args.n_images,
        intr,
        args.sr_factor,
        args.out,
        scene_name=args.scene,
        split=args.split,
        settings=settings,
        seed=args.seed,
    )
    print(f"wrote {args.n_images} {args.split} images to {ds.root}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_train_config(args, TrainConfig())
    dataset = SceneDataset.load(args.data)
    out = Path(args.out)
    if args.resume:
        if not (out / "ckpt.json").exists():
            raise SystemExit(f"--resume given but {out} holds no checkpoint")
        net = load_weights(out / "ckpt.nlf").config
    else:
        net = preset_config(args.preset)
    net = dataclasses.replace(
        net, in_channels=3 * cfg.k_points * (2 * cfg.l_bands + 1)
    )
    if net.upsample_factor != dataset.sr_factor:
        raise SystemExit(
            f"preset upsamples {net.upsample_factor}x but dataset wants {dataset.sr_factor}x"
        )
    model = build_model(net, seed=cfg.seed)
    lo = dataset.lo_intrinsics
    ray = {
        "k": cfg.k_points,
        "l": cfg.l_bands,
        "near": dataset.near,
        "far": dataset.far,
        "width": lo.width,
        "height": lo.height,
        "focal": lo.focal,
    }
    try:
        res = train_stage(
            model, dataset, cfg, out, stage=args.stage, resume=args.resume,
            ray=ray, log=_progress,
        )
    except Exception as e:
        raise SystemExit(str(e))
    print(f"stage {args.stage}: {res.iterations_run} iterations, final loss {res.final_loss:.5f}")
    return 0


def cmd_distill(args) -> int:
    stage1 = _load_train_config(args, TrainConfig())
    stage2 = dataclasses.replace(
        stage1, iterations=args.finetune_iterations, lr=args.finetune_lr
    )
    width, height = args.resolution
    cfg = DistillConfig(
        scene=args.scene,
        preset=args.preset,
        hi_width=width,
        hi_height=height,
        focal=args.focal,
        n_pseudo=args.n_pseudo,
        n_real_train=args.n_real_train,
        n_real_test=args.n_real_test,
        teacher_samples=args.samples,
        seed=stage1.seed,
        stage1=stage1,
        stage2=stage2,
    )
    report = distill_scene(cfg, args.out, log=_progress)
    print(json.dumps({"stage1": report["stage1"], "stage2": report["stage2"]}, indent=2))
    return 0


def _ray_meta(mw):
    ray = mw.ray or {}
    missing = {"k", "l", "near", "far"} - set(ray)
    if missing:
        raise SystemExit(f"weights carry no ray metadata ({sorted(missing)} missing)")
    return int(ray["k"]), int(ray["l"]), float(ray["near"]), float(ray["far"])


def cmd_render(args) -> int:
    if (args.pose_file is None) == (args.orbit is None):
        raise SystemExit("exactly one of --pose-file or --orbit is required")
    weights_path = Path(args.weights)
    if not weights_path.exists():
        raise SystemExit(f"weights file {weights_path} does not exist")
    mw = load_weights(weights_path)
    k, l, near, far = _ray_meta(mw)
    model = model_from_weights(mw)
    width, height = args.resolution
    sr = model.config.upsample_factor
    if width % sr or height % sr:
        raise SystemExit(f"model upsamples {sr}x which does not divide {width}x{height}")
    intr = CameraIntrinsics(width // sr, height // sr, args.focal / sr)

    if args.pose_file is not None:
        rows = json.loads(Path(args.pose_file).read_text())
        poses = [Pose(np.asarray(r, dtype=np.float64).reshape(3, 4)) for r in rows]
    else:
        poses = [
            orbit_pose(args.radius, 2 * np.pi * i / args.orbit, args.elevation)
            for i in range(args.orbit)
        ]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, pose in enumerate(poses):
        img = render_view(model, intr, pose, near, far, k, l)
        save_png(out / f"frame_{i:04d}.png", img)
    print(f"wrote {len(poses)} frames to {out}")
    return 0


def cmd_eval(args) -> int:
    mw = load_weights(args.weights)
    k, l, near, far = _ray_meta(mw)
    model = model_from_weights(mw)
    dataset = SceneDataset.load(args.data)
    cfg = TrainConfig(k_points=k, l_bands=l)
    result = evaluate(model, dataset, args.split, cfg, with_ssim=True)
    result["split"] = args.split
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_bench(args) -> int:
    from .bench import benchmark_forward

    if (args.weights is None) == (args.preset is None):
        raise SystemExit("exactly one of --weights or --preset is required")
    if args.weights:
        model = model_from_weights(load_weights(args.weights))
    else:
        model = build_model(preset_config(args.preset), seed=0)
    side = args.input_size
    rows = {"params": count_params(model), "results": []}
    variants = [("standard", model)]
    if model.config.use_norm and not model.folded:
        variants.append(("bn-folded", fold_batchnorm(model)))
    for name, m in variants:
        res = benchmark_forward(
            m, side, side, n_iters=args.iters, warmup=args.warmup, threads=args.threads
        )
        rows["results"].append({"variant": name, **res.to_dict()})
    print(json.dumps(rows, indent=2))
    return 0


def cmd_serve(args) -> int:
    from .service import RenderService

    mw = load_weights(args.weights)
    service = RenderService(mw, port=args.port, max_queue=args.max_queue)
    # flush so supervisors reading the pipe learn the bound port immediately
    print(f"serving on port {service.port}", flush=True)
    service.run_forever()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nelf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("teacher", help="render a dataset split with the volumetric teacher")
    t.add_argument("--scene", choices=sorted(NAMED_SCENES), required=True)
    t.add_argument("--n-images", dest="n_images", type=_positive_int, required=True)
    t.add_argument("--resolution", type=_parse_resolution, default=(128, 128))
    t.add_argument("--sr-factor", dest="sr_factor", type=_positive_int, default=4)
    t.add_argument("--focal", type=float, default=160.0)
    t.add_argument("--near", type=float, default=2.0)
    t.add_argument("--far", type=float, default=6.0)
    t.add_argument("--samples", type=_positive_int, default=256)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--split", choices=SPLITS, default="pseudo")
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_teacher)

    tr = sub.add_parser("train", help="run one training stage on a dataset")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--preset", choices=PRESET_NAMES, default="tiny")
    tr.add_argument("--stage", choices=("pseudo", "finetune"), default="pseudo")
    tr.add_argument("--resume", action="store_true")
    _add_train_flags(tr)
    tr.set_defaults(fn=cmd_train)

    d = sub.add_parser("distill", help="teacher data + two training stages + report")
    d.add_argument("--scene", choices=sorted(NAMED_SCENES), default="checker")
    d.add_argument("--preset", choices=PRESET_NAMES, default="tiny")
    d.add_argument("--resolution", type=_parse_resolution, default=(128, 128))
    d.add_argument("--focal", type=float, default=160.0)
    d.add_argument("--n-pseudo", dest="n_pseudo", type=_positive_int, default=200)
    d.add_argument("--n-real-train", dest="n_real_train", type=_positive_int, default=32)
    d.add_argument("--n-real-test", dest="n_real_test", type=_positive_int, default=8)
    d.add_argument("--samples", type=_positive_int, default=256)
    d.add_argument("--finetune-iterations", type=_positive_int, default=500)
    d.add_argument("--finetune-lr", type=float, default=1e-4)
    d.add_argument("--out", required=True)
    _add_train_flags(d)
    d.set_defaults(fn=cmd_distill)

    r = sub.add_parser("render", help="render frames from saved weights")
    r.add_argument("--weights", required=True)
    r.add_argument("--pose-file", dest="pose_file")
    r.add_argument("--orbit", type=_positive_int)
    r.add_argument("--resolution", type=_parse_resolution, default=(128, 128))
    r.add_argument("--focal", type=float, default=160.0)
    r.add_argument("--radius", type=float, default=4.0)
    r.add_argument("--elevation", type=float, default=0.5)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM of saved weights over a split")
    e.add_argument("--weights", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=SPLITS, default="real-test")
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", help="forward-pass latency statistics")
    b.add_argument("--weights")
    b.add_argument("--preset", choices=PRESET_NAMES)
    b.add_argument("--input-size", dest="input_size", type=_positive_int, default=100)
    b.add_argument("--iters", type=_positive_int, default=10)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--threads", type=_positive_int, default=1)
    b.set_defaults(fn=cmd_bench)

    s = sub.add_parser("serve", help="interactive render service over a socket")
    s.add_argument("--weights", required=True)
    s.add_argument("--port", type=int, default=8765)
    s.add_argument("--max-queue", dest="max_queue", type=_positive_int, default=4)
    s.set_defaults(fn=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
