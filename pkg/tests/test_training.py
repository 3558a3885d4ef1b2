"""Trainer: initialization, Adam, projection, schedule, fit loop, resume."""

import math

import numpy as np
import pytest

from hqdeblur.backprop import GradientSet
from hqdeblur.training import (
    OptimState,
    TrainConfig,
    TrainingDivergedError,
    adam_update,
    fit,
    init_params,
    load_checkpoint,
    lr_for_epoch,
    project_params,
    save_checkpoint,
    train_step,
)
from common import blurred_scene, make_params


def small_config(**overrides):
    base = dict(epochs=2, lr0=1e-3, batch_size=2, seed=7)
    base.update(overrides)
    base.setdefault("decay_every", base["epochs"])
    return TrainConfig(**base)


def tiny_dataset(n=4, seed=0, shape=(16, 16)):
    rng = np.random.default_rng(seed)
    return [blurred_scene(rng, shape=shape, k_extent=3, k_shape=(5, 5),
                          noise=0.005) for _ in range(n)]


def params_equal(a, b):
    return (all(np.array_equal(x, y) for x, y in zip(a.w, b.w))
            and np.array_equal(a.b, b.b) and np.array_equal(a.zeta, b.zeta)
            and np.array_equal(a.beta, b.beta) and np.array_equal(a.eta, b.eta))


class TestConfig:
    def test_defaults_are_valid(self):
        TrainConfig().validate()

    def test_defaults_match_protocol(self):
        cfg = TrainConfig()
        assert (cfg.epochs, cfg.lr0, cfg.batch_size) == (160, 1e-3, 32)
        assert (cfg.decay_factor, cfg.decay_every) == (0.5, 20)
        assert (cfg.kappa0, cfg.beta1, cfg.beta2, cfg.eps_adam) == \
            (1e5, 0.9, 0.999, 1e-8)

    @pytest.mark.parametrize("bad", [
        dict(epochs=0), dict(lr0=0.0), dict(batch_size=0),
        dict(decay_every=200, epochs=100), dict(beta1=1.0), dict(seed=-1),
    ])
    def test_invalid_configs_rejected(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()


class TestInitParams:
    def test_stated_initial_values(self):
        p = init_params(depth=3, channels=4, seed=1)
        assert np.all(p.b == 0.02)
        assert np.all(p.zeta == 1.0)
        assert np.all(p.beta == 0.0)
        assert np.all(p.eta == 20.0)

    def test_bank_shapes_and_fan_bound(self):
        p = init_params(depth=3, channels=4, planes=3, seed=1)
        assert [w.shape for w in p.w] == [(4, 4, 3, 3), (4, 4, 3, 3),
                                          (4, 3, 3, 3)]
        assert np.all(np.abs(p.w[0]) <= math.sqrt(6 / (36 + 36)))
        assert np.all(np.abs(p.w[-1]) <= math.sqrt(6 / (27 + 36)))

    def test_deterministic_and_seed_sensitive(self):
        a = init_params(depth=2, channels=3, seed=9)
        b = init_params(depth=2, channels=3, seed=9)
        c = init_params(depth=2, channels=3, seed=10)
        assert params_equal(a, b)
        assert not params_equal(a, c)


class TestSchedule:
    def test_halving_every_twenty_epochs(self):
        cfg = TrainConfig()
        assert lr_for_epoch(0, cfg) == 1e-3
        assert lr_for_epoch(19, cfg) == 1e-3
        assert lr_for_epoch(20, cfg) == 5e-4
        assert lr_for_epoch(39, cfg) == 5e-4
        assert lr_for_epoch(40, cfg) == 2.5e-4
        assert lr_for_epoch(159, cfg) == pytest.approx(1e-3 * 0.5 ** 7)


class TestAdam:
    def test_zero_gradients_leave_params_untouched(self):
        rng = np.random.default_rng(2)
        params = make_params(rng)
        before = params.copy()
        opt = OptimState.zeros_like(params)
        adam_update(params, GradientSet.zeros_like(params), opt, 1e-3,
                    TrainConfig())
        assert params_equal(params, before)
        assert opt.step == 1

    def test_first_step_is_signed_unit_step(self):
        """After one step the bias-corrected update is lr*g/(|g|+eps)."""
        rng = np.random.default_rng(3)
        params = make_params(rng)
        before = params.copy()
        grads = GradientSet.zeros_like(params)
        grads.eta[:] = [4.0, -2.0]
        opt = OptimState.zeros_like(params)
        cfg = TrainConfig()
        adam_update(params, grads, opt, 1e-3, cfg)
        expect = before.eta - 1e-3 * grads.eta / (np.abs(grads.eta) + cfg.eps_adam)
        np.testing.assert_allclose(params.eta, expect, rtol=1e-15)
        assert all(np.array_equal(x, y) for x, y in zip(params.w, before.w))
        assert np.array_equal(params.b, before.b)

    def test_moment_accumulation_matches_reference(self):
        cfg = TrainConfig()
        rng = np.random.default_rng(4)
        params = make_params(rng, L=1, C=1)
        opt = OptimState.zeros_like(params)
        theta0 = params.beta[0]
        g_seq = [0.5, -1.5, 2.0]
        m = v = 0.0
        theta = theta0
        for t, g in enumerate(g_seq, start=1):
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            theta -= 1e-2 * (m / (1 - cfg.beta1 ** t)) / (
                math.sqrt(v / (1 - cfg.beta2 ** t)) + cfg.eps_adam)
            grads = GradientSet.zeros_like(params)
            grads.beta[0] = g
            adam_update(params, grads, opt, 1e-2, cfg)
        assert params.beta[0] == pytest.approx(theta, rel=1e-14)
        assert opt.step == 3


class TestProjection:
    def test_negative_and_undersized_entries_are_clamped(self):
        rng = np.random.default_rng(5)
        params = make_params(rng)
        params.b[0, 0] = -0.3
        params.beta[1] = -2.0
        params.zeta[0, 1] = 1e-12
        params.eta[0] = -5.0
        project_params(params)
        assert params.b[0, 0] == 0.0
        assert params.beta[1] == 0.0
        assert params.zeta[0, 1] == 1e-8
        assert params.eta[0] == 1e-8
        assert np.all(params.b >= 0) and np.all(params.zeta >= 1e-8)


class TestTrainStep:
    def test_updates_are_deterministic(self):
        data = tiny_dataset(2)
        cfg = small_config()
        runs = []
        for _ in range(2):
            params = init_params(depth=2, channels=2, k_shape=(5, 5), seed=3)
            opt = OptimState.zeros_like(params)
            train_step(data, params, opt, 1e-3, cfg)
            runs.append(params)
        assert params_equal(*runs)

    def test_projection_applied_after_update(self):
        data = tiny_dataset(2)
        params = init_params(depth=2, channels=2, k_shape=(5, 5), seed=3)
        params.beta[:] = 0.0  # gradient pressure may push beta negative
        opt = OptimState.zeros_like(params)
        for _ in range(3):
            train_step(data, params, opt, 1e-3, small_config())
        assert np.all(params.beta >= 0)
        assert np.all(params.b >= 0)
        assert np.all(params.zeta >= 1e-8) and np.all(params.eta >= 1e-8)

    def test_loss_statistics_are_sample_means(self):
        data = tiny_dataset(3)
        params = init_params(depth=2, channels=2, k_shape=(5, 5), seed=3)
        cfg = small_config()
        singles = []
        for triple in data:
            p = params.copy()
            singles.append(train_step([triple], p, OptimState.zeros_like(p),
                                      1e-3, cfg).total)
        stats = train_step(data, params.copy(),
                           OptimState.zeros_like(params), 1e-3, cfg)
        assert stats.total == pytest.approx(np.mean(singles), rel=1e-12)
        assert stats.total == pytest.approx(stats.kernel_term + stats.image_term,
                                            rel=1e-12)

    def test_non_finite_loss_raises(self):
        y, x, k = tiny_dataset(1)[0]
        params = init_params(depth=2, channels=2, k_shape=(5, 5), seed=3)
        with pytest.raises(TrainingDivergedError):
            train_step([(y, np.full_like(x, np.nan), k)], params,
                       OptimState.zeros_like(params), 1e-3, small_config())

    def test_empty_batch_rejected(self):
        params = init_params(depth=2, channels=2, k_shape=(5, 5), seed=3)
        with pytest.raises(ValueError):
            train_step([], params, OptimState.zeros_like(params), 1e-3,
                       small_config())


class TestCheckpointIO:
    def test_roundtrip_preserves_everything(self, tmp_path):
        rng = np.random.default_rng(6)
        params = make_params(rng)
        opt = OptimState.zeros_like(params)
        opt.m.eta[:] = [1.5, -2.5]
        opt.v.w[0] += 0.25
        opt.step = 17
        path = tmp_path / "ckpt.dblt"
        save_checkpoint(path, params, opt, epoch=9)
        loaded, opt2, epoch = load_checkpoint(path)
        assert params_equal(loaded, params)
        assert np.array_equal(opt2.m.eta, opt.m.eta)
        assert np.array_equal(opt2.v.w[0], opt.v.w[0])
        assert opt2.step == 17 and epoch == 9

    def test_plain_model_file_is_not_a_checkpoint(self, tmp_path):
        from hqdeblur.network import save_model
        rng = np.random.default_rng(7)
        params = make_params(rng)
        save_model(tmp_path / "m.dblt", params)
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "m.dblt")


class TestFit:
    def test_loop_outputs_log_and_checkpoints(self, tmp_path):
        data = tiny_dataset(4)
        params = init_params(depth=2, channels=2, k_shape=(5, 5), seed=3)
        result = fit(data, params, small_config(epochs=2), tmp_path,
                     checkpoint_every=1)
        assert len(result.history) == 2
        assert (tmp_path / "model.dblt").exists()
        assert (tmp_path / "checkpoint_epoch_0001.dblt").exists()
        assert (tmp_path / "checkpoint_epoch_0002.dblt").exists()
        log = (tmp_path / "training_log.csv").read_text().splitlines()
        assert log[0] == "epoch,lr,mean_total_loss,mean_kernel_term,mean_image_term"
        assert len(log) == 3
        assert log[1].startswith("0,0.001,")

    def test_identical_runs_are_byte_identical(self, tmp_path):
        data = tiny_dataset(4)
        blobs = []
        for name in ("a", "b"):
            params = init_params(depth=2, channels=2, k_shape=(5, 5), seed=3)
            fit(data, params, small_config(epochs=2), tmp_path / name)
            blobs.append(((tmp_path / name / "model.dblt").read_bytes(),
                          (tmp_path / name / "training_log.csv").read_bytes()))
        assert blobs[0] == blobs[1]

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        data = tiny_dataset(4)
        full = fit(data, init_params(depth=2, channels=2, k_shape=(5, 5), seed=3),
                   small_config(epochs=4), tmp_path / "full")
        fit(data, init_params(depth=2, channels=2, k_shape=(5, 5), seed=3),
            small_config(epochs=2), tmp_path / "part")
        params, opt, epoch = load_checkpoint(tmp_path / "part" / "model.dblt")
        assert epoch == 2
        resumed = fit(data, params, small_config(epochs=4), tmp_path / "resumed",
                      opt=opt, start_epoch=epoch)
        assert [s.total for s in resumed.history] == \
            [s.total for s in full.history[2:]]
        assert (tmp_path / "full" / "model.dblt").read_bytes() == \
            (tmp_path / "resumed" / "model.dblt").read_bytes()

    def test_single_sample_loss_shrinks(self, tmp_path):
        data = tiny_dataset(1, seed=2)
        params = init_params(depth=2, channels=2, k_shape=(5, 5), seed=3)
        result = fit(data, params, small_config(epochs=30, batch_size=1),
                     tmp_path, checkpoint_every=30)
        losses = [s.total for s in result.history]
        assert losses[-1] < losses[0]
        assert min(losses) == pytest.approx(losses[-1], rel=0.5)

    def test_empty_dataset_rejected(self, tmp_path):
        params = init_params(depth=2, channels=2, k_shape=(5, 5), seed=3)
        with pytest.raises(ValueError):
            fit([], params, small_config(), tmp_path)
