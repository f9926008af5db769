"""Training-loop tests: schedules, checkpoint resume, divergence, distillation."""

import json

import numpy as np
import pytest

import nelf.train
from nelf.dataset import generate_pseudo_dataset
from nelf.fields import make_scene
from nelf.network import NetConfig, SRStageSpec, build_model, count_params, preset_config
from nelf.rays import CameraIntrinsics, encoding_channels
from nelf.train import (
    DistillConfig,
    TrainConfig,
    TrainingDiverged,
    distill_scene,
    evaluate,
    load_checkpoint,
    lr_at,
    make_batch,
    train_stage,
)
from nelf.weights import load_weights


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    """Four pseudo plus two real-train and two real-test views of a sphere."""
    root = tmp_path_factory.mktemp("scene") / "data"
    field = make_scene("sphere")
    intr = CameraIntrinsics(16, 16, 20.0)
    ds = generate_pseudo_dataset(field, 4, intr, 2, root, split="pseudo", seed=0)
    ds = generate_pseudo_dataset(field, 2, intr, 2, root, split="real-train", seed=1)
    ds = generate_pseudo_dataset(field, 2, intr, 2, root, split="real-test", seed=2)
    return ds


def tiny_net(k=2, l=2, width=16):
    return NetConfig(
        in_channels=encoding_channels(k, l),
        width=width,
        n_res_blocks=1,
        sr_plan=(SRStageSpec(2, 16),),
    )


def tiny_cfg(**kw):
    base = dict(
        iterations=8, batch_size=2, lr=3e-3, k_points=2, l_bands=2, checkpoint_every=4
    )
    base.update(kw)
    return TrainConfig(**base)


class TestSchedule:
    def test_starts_at_base_rate(self):
        cfg = TrainConfig(lr=5e-4)
        assert lr_at(cfg, 0) == 5e-4

    def test_decays_tenfold_over_schedule(self):
        cfg = TrainConfig(iterations=1000, lr=5e-4)
        np.testing.assert_allclose(lr_at(cfg, 1000), 5e-5, rtol=1e-12)

    def test_monotone_decreasing(self):
        cfg = TrainConfig(iterations=100)
        rates = [lr_at(cfg, i) for i in range(0, 101, 10)]
        assert all(a > b for a, b in zip(rates, rates[1:]))

    def test_decay_steps_override(self):
        cfg = TrainConfig(iterations=1000, decay_steps=500, lr=1e-3)
        np.testing.assert_allclose(lr_at(cfg, 500), 1e-4, rtol=1e-12)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(iterations=0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)
        with pytest.raises(ValueError):
            TrainConfig(decay_steps=-5)


class TestBatches:
    def test_shapes_follow_dataset_geometry(self, tiny_dataset):
        cfg = tiny_cfg()
        rng = np.random.default_rng(0)
        x, y = make_batch(tiny_dataset, [0, 1], cfg, mode="train", rng=rng)
        assert x.shape == (2, encoding_channels(2, 2), 8, 8)
        assert y.shape == (2, 3, 16, 16)
        assert x.data.dtype == np.float32

    def test_empty_batch_rejected(self, tiny_dataset):
        with pytest.raises(ValueError):
            make_batch(tiny_dataset, [], tiny_cfg())

    def test_targets_match_stored_images(self, tiny_dataset):
        x, y = make_batch(tiny_dataset, [2], tiny_cfg(), mode="test")
        np.testing.assert_allclose(y.data[0], tiny_dataset.load_image(2), atol=1e-7)


class TestTrainStage:
    def test_loss_decreases_on_average(self, tiny_dataset, tmp_path):
        model = build_model(tiny_net(), seed=0)
        res = train_stage(
            model, tiny_dataset, tiny_cfg(iterations=40), tmp_path / "s", stage="pseudo"
        )
        assert np.mean(res.losses[-5:]) < np.mean(res.losses[:5])

    def test_first_loss_with_zero_head_is_flat_field_error(self, tiny_dataset, tmp_path):
        """With a zeroed head the first prediction is exactly 0.5 everywhere,
        so the first recorded loss equals the mean squared flat-field error."""
        model = build_model(tiny_net(), seed=0)
        model.head_weight.value[...] = 0.0
        model.head_bias.value[...] = 0.0
        cfg = tiny_cfg(iterations=1, batch_size=1, checkpoint_every=1)
        res = train_stage(model, tiny_dataset, cfg, tmp_path / "s", stage="pseudo")

        rng = np.random.default_rng((cfg.seed, 0, 0))
        pool = tiny_dataset.indices("pseudo")
        idx = rng.choice(pool, size=1, replace=False)
        target = tiny_dataset.load_image(int(idx[0])).astype(np.float32)
        np.testing.assert_allclose(res.losses[0], np.mean((0.5 - target) ** 2), rtol=1e-6)

    def test_same_config_reproduces_loss_sequence(self, tiny_dataset, tmp_path):
        cfg = tiny_cfg()
        a = train_stage(build_model(tiny_net(), seed=3), tiny_dataset, cfg, tmp_path / "a")
        b = train_stage(build_model(tiny_net(), seed=3), tiny_dataset, cfg, tmp_path / "b")
        np.testing.assert_array_equal(a.losses, b.losses)

    def test_stages_draw_different_batches(self, tiny_dataset, tmp_path):
        """The per-iteration generator is keyed by stage, not just iteration."""
        cfg = tiny_cfg(iterations=4)
        a = train_stage(build_model(tiny_net(), seed=3), tiny_dataset, cfg, tmp_path / "a")
        b = train_stage(
            build_model(tiny_net(), seed=3), tiny_dataset, cfg, tmp_path / "b", stage="finetune"
        )
        assert not np.array_equal(a.losses, b.losses)

    def test_unknown_stage_rejected(self, tiny_dataset, tmp_path):
        with pytest.raises(ValueError):
            train_stage(
                build_model(tiny_net()), tiny_dataset, tiny_cfg(), tmp_path, stage="warmup"
            )

    def test_history_file_written(self, tiny_dataset, tmp_path):
        train_stage(build_model(tiny_net(), seed=0), tiny_dataset, tiny_cfg(), tmp_path / "s")
        hist = json.loads((tmp_path / "s" / "history.json").read_text())
        assert len(hist["losses"]) == 8 and hist["stage"] == "pseudo"


class TestCheckpointing:
    def test_interrupted_run_resumes_bitwise(self, tiny_dataset, tmp_path, monkeypatch):
        """Killing a run mid-flight and resuming from its checkpoint replays
        the remaining iterations bit for bit."""
        cfg = tiny_cfg(iterations=12, checkpoint_every=4)
        ref_model = build_model(tiny_net(), seed=0)
        ref = train_stage(ref_model, tiny_dataset, cfg, tmp_path / "a")

        real_step = nelf.train.adam_step
        calls = {"n": 0}

        def dying_step(params, state, lr, **kw):
            real_step(params, state, lr, **kw)
            calls["n"] += 1
            if calls["n"] == 9:  # dies after the iteration-8 checkpoint exists
                raise KeyboardInterrupt

        monkeypatch.setattr(nelf.train, "adam_step", dying_step)
        interrupted = build_model(tiny_net(), seed=0)
        with pytest.raises(KeyboardInterrupt):
            train_stage(interrupted, tiny_dataset, cfg, tmp_path / "b")
        monkeypatch.setattr(nelf.train, "adam_step", real_step)

        resumed = build_model(tiny_net(), seed=0)
        res = train_stage(resumed, tiny_dataset, cfg, tmp_path / "b", resume=True)
        np.testing.assert_array_equal(res.losses, ref.losses[8:])
        for a, b in zip(ref_model.params(), resumed.params()):
            np.testing.assert_array_equal(a.value, b.value)

    def test_resume_restores_identical_weights(self, tiny_dataset, tmp_path):
        cfg = tiny_cfg(iterations=8, checkpoint_every=8)
        model = build_model(tiny_net(), seed=1)
        train_stage(model, tiny_dataset, cfg, tmp_path / "s")
        clone = build_model(tiny_net(), seed=1)
        it, state = load_checkpoint(clone, tmp_path / "s", "pseudo", cfg)
        assert it == 8 and state.step == 8
        for a, b in zip(model.params(), clone.params()):
            np.testing.assert_array_equal(a.value, b.value)

    def test_foreign_config_rejected(self, tiny_dataset, tmp_path):
        cfg = tiny_cfg()
        model = build_model(tiny_net(), seed=0)
        train_stage(model, tiny_dataset, cfg, tmp_path / "s")
        other = tiny_cfg(lr=1e-3)
        with pytest.raises(ValueError):
            load_checkpoint(build_model(tiny_net()), tmp_path / "s", "pseudo", other)

    @pytest.mark.filterwarnings("ignore:invalid value encountered")
    def test_divergence_aborts_and_keeps_checkpoint(self, tiny_dataset, tmp_path):
        cfg = tiny_cfg(iterations=8, checkpoint_every=2)
        model = build_model(tiny_net(), seed=0)
        train_stage(model, tiny_dataset, cfg, tmp_path / "s")
        # poison a backbone weight: the next normalization sees infinities
        model.params()[0].value[...] = np.inf
        with pytest.raises(TrainingDiverged) as exc:
            train_stage(model, tiny_dataset, cfg, tmp_path / "s")
        assert exc.value.checkpoint is not None and exc.value.checkpoint.exists()
        restored = build_model(tiny_net(), seed=0)
        it, _ = load_checkpoint(restored, tmp_path / "s", "pseudo", cfg)
        assert it == 8
        assert np.all(np.isfinite(restored.params()[0].value))


class TestEvaluate:
    def test_reports_mean_over_split(self, tiny_dataset):
        model = build_model(tiny_net(), seed=0)
        out = evaluate(model, tiny_dataset, "real-test", tiny_cfg(), with_ssim=False)
        assert set(out) == {"psnr", "n_images"} and out["n_images"] == 2
        assert 0.0 < out["psnr"] < 100.0

    def test_empty_split_rejected(self, tiny_dataset):
        model = build_model(tiny_net(), seed=0)
        with pytest.raises(ValueError):
            evaluate(model, tiny_dataset, "no-such-split", tiny_cfg())


class TestOverfit:
    @pytest.mark.slow
    def test_single_view_memorization(self, tmp_path):
        """Two thousand iterations on one image drive train-view error
        below 35 dB reconstruction quality."""
        intr = CameraIntrinsics(16, 16, 20.0)
        ds = generate_pseudo_dataset(
            make_scene("sphere"), 1, intr, 2, tmp_path / "d", split="pseudo", seed=0
        )
        k = l = 4
        net = NetConfig(
            in_channels=encoding_channels(k, l),
            width=32,
            n_res_blocks=2,
            sr_plan=(SRStageSpec(2, 16),),
        )
        model = build_model(net, seed=0)
        cfg = TrainConfig(
            iterations=2000, batch_size=1, lr=3e-3, k_points=k, l_bands=l,
            checkpoint_every=2000,
        )
        train_stage(model, ds, cfg, tmp_path / "s", stage="pseudo")
        quality = evaluate(model, ds, "pseudo", cfg, max_images=1)
        assert quality["psnr"] > 35.0, quality


class TestDistillPipeline:
    def test_micro_run_produces_report_and_weights(self, tmp_path):
        cfg = DistillConfig(
            scene="sphere",
            preset="tiny",
            hi_width=32,
            hi_height=32,
            focal=40.0,
            n_pseudo=6,
            n_real_train=2,
            n_real_test=2,
            teacher_samples=32,
            stage1=TrainConfig(iterations=30, batch_size=2, checkpoint_every=15),
            stage2=TrainConfig(iterations=10, batch_size=2, checkpoint_every=10, lr=1e-4),
        )
        report = distill_scene(cfg, tmp_path / "run")
        assert report["param_count"] == count_params(build_model(preset_config("tiny")))
        assert set(report["stage1"]) == {"final_loss", "psnr", "ssim", "n_images"}
        assert report["phases"]["total_s"] > 0

        saved = json.loads((tmp_path / "run" / "report.json").read_text())
        assert saved["stage2"]["psnr"] == report["stage2"]["psnr"]

        mw = load_weights(tmp_path / "run" / "final.nlf")
        assert mw.ray == {
            "k": 8, "l": 6, "near": 2.0, "far": 6.0,
            "width": 8, "height": 8, "focal": 10.0,
        }
        assert mw.config == preset_config("tiny")

    def test_mismatched_stage_encodings_rejected(self, tmp_path):
        cfg = DistillConfig(stage2=TrainConfig(k_points=4))
        with pytest.raises(ValueError):
            distill_scene(cfg, tmp_path / "run")
