"""Architecture tests: shape laws, parameter budgets, and training-mode behavior."""

import dataclasses

import numpy as np
import pytest

from nelf import ops
from nelf.gradcheck import max_rel_error
from nelf.network import (
    Model,
    NetConfig,
    SRStageSpec,
    ablation_grid,
    build_model,
    count_params,
    depth_config,
    fold_batchnorm,
    preset_config,
    width_config,
)
from nelf.rays import encoding_channels
from nelf.tensor import Tensor4, no_grad


def tiny_input(cfg: NetConfig, h=4, w=4, batch=1, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return Tensor4(rng.standard_normal((batch, cfg.in_channels, h, w)), dtype=dtype)


class TestConfigValidation:
    def test_activation_must_be_known(self):
        with pytest.raises(ValueError):
            NetConfig(in_channels=8, width=16, n_res_blocks=1, sr_plan=(), activation="swish")

    def test_sr_factor_must_be_supported(self):
        """Only 2x and 3x upsampling stages have a defined kernel geometry."""
        with pytest.raises(ValueError):
            NetConfig(
                in_channels=8, width=16, n_res_blocks=1, sr_plan=(SRStageSpec(5, 16),)
            )

    def test_upsample_factor_is_product_of_stages(self):
        cfg = NetConfig(
            in_channels=8,
            width=16,
            n_res_blocks=1,
            sr_plan=(SRStageSpec(2, 16), SRStageSpec(2, 16), SRStageSpec(3, 16)),
        )
        assert cfg.upsample_factor == 12

    def test_dict_round_trip(self):
        cfg = preset_config("d60-sr3-12x")
        assert NetConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_preset_rejected(self):
        with pytest.raises(ValueError):
            preset_config("giant")

    def test_depth_config_rejects_unknown_depth(self):
        with pytest.raises(ValueError):
            depth_config(45)

    def test_width_config_needs_divisible_width(self):
        """Stage channel counts derive from width/4 and width/16."""
        with pytest.raises(ValueError):
            width_config(100)


class TestForwardShapes:
    def test_no_sr_keeps_resolution(self):
        cfg = NetConfig(in_channels=8, width=16, n_res_blocks=1, sr_plan=())
        model = build_model(cfg, seed=0)
        out = model.forward(tiny_input(cfg, 5, 7), mode="train")
        assert out.shape == (1, 3, 5, 7)

    def test_tiny_preset_upsamples_4x(self):
        cfg = preset_config("tiny")
        model = build_model(cfg, seed=0)
        out = model.forward(tiny_input(cfg, 8, 8), mode="train")
        assert out.shape == (1, 3, 32, 32)

    def test_mixed_factors_multiply(self):
        cfg = NetConfig(
            in_channels=8,
            width=16,
            n_res_blocks=1,
            sr_plan=(SRStageSpec(2, 16), SRStageSpec(3, 8)),
        )
        model = build_model(cfg, seed=1)
        out = model.forward(tiny_input(cfg, 3, 4), mode="train")
        assert out.shape == (1, 3, 18, 24)

    def test_batch_dimension_preserved(self):
        cfg = preset_config("tiny")
        model = build_model(cfg, seed=0)
        out = model.forward(tiny_input(cfg, 4, 4, batch=3), mode="train")
        assert out.shape == (3, 3, 16, 16)

    def test_channel_mismatch_rejected(self):
        cfg = preset_config("tiny")
        model = build_model(cfg, seed=0)
        bad = Tensor4(np.zeros((1, cfg.in_channels + 1, 4, 4)))
        with pytest.raises(ValueError):
            model.forward(bad, mode="train")

    def test_mode_validated(self):
        cfg = preset_config("tiny")
        model = build_model(cfg, seed=0)
        with pytest.raises(ValueError):
            model.forward(tiny_input(cfg), mode="inference")

    @pytest.mark.slow
    def test_full_size_three_stage_shape(self):
        """The 8x pipeline maps a 100x100 ray grid to an 800x800 frame."""
        cfg = preset_config("d60-sr3-8x")
        model = build_model(cfg, seed=0)
        x = tiny_input(cfg, 100, 100)
        with no_grad():
            out = model.forward(x, mode="eval")
        assert out.shape == (1, 3, 800, 800)

    @pytest.mark.slow
    def test_full_size_12x_shape(self):
        """With a final 3x stage an 84x63 grid lands on 1008x756."""
        cfg = preset_config("d60-sr3-12x")
        assert cfg.in_channels == encoding_channels(8, 6)
        model = build_model(cfg, seed=0)
        x = tiny_input(cfg, 84, 63)
        with no_grad():
            out = model.forward(x, mode="eval")
        assert out.shape == (1, 3, 1008, 756)


class TestParameterBudgets:
    def test_standard_preset_count_frozen(self):
        assert count_params(build_model(preset_config("d60-sr3-8x"))) == 4240035

    def test_standard_preset_near_four_million(self):
        n = count_params(build_model(preset_config("d60-sr3-8x")))
        assert abs(n - 3.9e6) / 3.9e6 < 0.10

    def test_tiny_preset_count_frozen(self):
        assert count_params(build_model(preset_config("tiny"))) == 35027

    def test_width_sweep_hits_budget_windows(self):
        """Scaling width through 64..512 lands near 0.3/1.0/3.9/8.7M params."""
        targets = {64: 0.3e6, 128: 1.0e6, 256: 3.9e6, 384: 8.7e6}
        for width, target in targets.items():
            n = count_params(build_model(width_config(width)))
            assert abs(n - target) / target < 0.15, (width, n)

    def test_width_sweep_monotone(self):
        counts = [count_params(build_model(width_config(w))) for w in (64, 128, 256, 384, 512)]
        assert counts == sorted(counts)

    def test_depth_sweep_monotone(self):
        counts = [count_params(build_model(depth_config(d))) for d in (30, 60, 80, 100)]
        assert counts == sorted(counts)
        assert counts[1] == 4240035  # depth 60 is the standard preset backbone

    def test_ablation_grid_builds(self):
        grid = ablation_grid()
        assert len(grid) == 16
        for cfg in grid.values():
            assert cfg.in_channels == 312


class TestForwardBehavior:
    def test_output_strictly_inside_unit_interval(self):
        """Sigmoid head keeps every train-mode output in the open interval (0,1)."""
        cfg = preset_config("tiny")
        model = build_model(cfg, seed=3)
        out = model.forward(tiny_input(cfg, 8, 8, seed=7), mode="train")
        assert np.all(out.data > 0.0) and np.all(out.data < 1.0)

    def test_zero_head_gives_exact_half(self):
        cfg = preset_config("tiny")
        model = build_model(cfg, seed=0)
        model.head_weight.value[...] = 0.0
        model.head_bias.value[...] = 0.0
        out = model.forward(tiny_input(cfg), mode="train")
        np.testing.assert_array_equal(out.data, np.full_like(out.data, 0.5))

    def test_eval_forward_deterministic(self):
        cfg = preset_config("tiny")
        model = build_model(cfg, seed=0)
        # move running stats off their virgin values first
        model.forward(tiny_input(cfg, 4, 4, seed=1), mode="train")
        x = tiny_input(cfg, 4, 4, seed=2)
        with no_grad():
            a = model.forward(x, mode="eval")
            b = model.forward(x, mode="eval")
        np.testing.assert_array_equal(a.data, b.data)

    def test_eval_does_not_touch_running_stats(self):
        cfg = preset_config("tiny")
        model = build_model(cfg, seed=0)
        model.forward(tiny_input(cfg, 4, 4, seed=1), mode="train")
        before = [buf.copy() for _, buf in model.buffers()]
        with no_grad():
            model.forward(tiny_input(cfg, 4, 4, seed=2), mode="eval")
        after = [buf for _, buf in model.buffers()]
        for b, a in zip(before, after):
            np.testing.assert_array_equal(b, a)

    def test_train_updates_running_stats(self):
        cfg = preset_config("tiny")
        model = build_model(cfg, seed=0)
        before = [buf.copy() for _, buf in model.buffers()]
        model.forward(tiny_input(cfg, 4, 4, seed=1), mode="train")
        after = [buf for _, buf in model.buffers()]
        changed = sum(0 if np.array_equal(b, a) else 1 for b, a in zip(before, after))
        assert changed == len(before)

    def test_same_seed_same_model(self):
        cfg = preset_config("tiny")
        a, b = build_model(cfg, seed=11), build_model(cfg, seed=11)
        for pa, pb in zip(a.params(), b.params()):
            np.testing.assert_array_equal(pa.value, pb.value)

    def test_different_seeds_differ(self):
        cfg = preset_config("tiny")
        a, b = build_model(cfg, seed=1), build_model(cfg, seed=2)
        assert not np.array_equal(a.head_weight.value, b.head_weight.value)


class TestEndToEndGradient:
    def test_full_model_matches_finite_differences(self):
        """Backprop through stem, residual blocks, one SR stage, and the head
        agrees with central differences on every parameter of a small model."""
        cfg = NetConfig(
            in_channels=6, width=8, n_res_blocks=2, sr_plan=(SRStageSpec(2, 8),)
        )
        model = build_model(cfg, seed=5, dtype=np.float64)
        rng = np.random.default_rng(9)
        x = Tensor4(rng.standard_normal((1, 6, 4, 4)), dtype=np.float64)
        target = rng.random((1, 3, 8, 8))

        def fn():
            return ops.mse_loss(model.forward(x, mode="train"), target)

        err = max_rel_error(fn, model.params(), h=1e-5)
        assert err < 1e-3, err

    def test_gradients_reach_every_parameter(self):
        cfg = preset_config("tiny")
        model = build_model(cfg, seed=0)
        rng = np.random.default_rng(0)
        x = Tensor4(rng.standard_normal((1, cfg.in_channels, 4, 4)).astype(np.float32))
        loss = ops.mse_loss(model.forward(x, mode="train"), rng.random((1, 3, 16, 16)))
        loss.backward()
        total = nonzero = 0
        for p in model.params():
            assert np.any(p.grad != 0.0), p.name
            total += p.grad.size
            nonzero += np.count_nonzero(p.grad)
        assert nonzero / total > 0.99


class TestFoldBatchnorm:
    @staticmethod
    def warmed_model(seed=0):
        cfg = preset_config("tiny")
        model = build_model(cfg, seed=seed)
        rng = np.random.default_rng(seed + 100)
        for _ in range(3):  # give the running stats a non-trivial history
            x = Tensor4(rng.standard_normal((2, cfg.in_channels, 4, 4)).astype(np.float32))
            model.forward(x, mode="train")
        return model

    def test_eval_outputs_preserved(self):
        model = self.warmed_model()
        folded = fold_batchnorm(model)
        rng = np.random.default_rng(3)
        for _ in range(3):
            x = Tensor4(rng.standard_normal((1, model.config.in_channels, 5, 5)).astype(np.float32))
            with no_grad():
                a = model.forward(x, mode="eval")
                b = folded.forward(x, mode="eval")
            np.testing.assert_allclose(b.data, a.data, atol=1e-5)

    def test_fold_sheds_norm_parameters(self):
        model = self.warmed_model()
        folded = fold_batchnorm(model)
        assert count_params(folded) < count_params(model)
        assert list(folded.buffers()) == []
        assert folded.folded

    def test_double_fold_rejected(self):
        folded = fold_batchnorm(self.warmed_model())
        with pytest.raises(ValueError):
            fold_batchnorm(folded)

    def test_fold_without_norm_rejected(self):
        cfg = dataclasses.replace(preset_config("tiny"), use_norm=False)
        model = build_model(cfg, seed=0)
        with pytest.raises(ValueError):
            fold_batchnorm(model)
