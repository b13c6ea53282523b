"""Tests for SGD, pretraining, predictor training and the end-to-end pipeline."""

import dataclasses
import math

import numpy as np
import pytest

from stemcast.config import ModelConfig, RunConfig, SyntheticConfig, TaskSpec, TrainConfig
from stemcast.datasets import generate_synthetic, prepare_task
from stemcast.errors import ConfigError, DataError, NumericError, ShapeError
from stemcast.models import EncoderDecoderParams, architecture_for, build_model
from stemcast.ndmath import Tensor
from stemcast.training import (
    ABLATION_VARIANTS,
    EpochStats,
    TrainRecord,
    ablation_config,
    dataset_loss,
    evaluate_split,
    fit,
    minibatches,
    moving_average,
    pretrain_autoencoder,
    reconstruction_error,
    run_ablation,
    sgd_step,
    train_predictor,
)

SMALL_MODEL = dict(encoder_sizes=(4, 3), predictor_hidden=4, gru_sizes=(4, 4), mlp_hidden=(6,))
TASK = TaskSpec("small", window_length=6, horizon=1, stride=1)


def _config(family="wt-ed-lstm-am", epochs=2, pretrain_epochs=1, hours=240, noise=0.01, **train):
    train = dict(dict(learning_rate=0.05, batch_size=16, epochs=epochs, pretrain_epochs=pretrain_epochs), **train)
    return RunConfig(
        synthetic=SyntheticConfig(n_hours=hours, noise_sigma=noise),
        task=TASK,
        model=ModelConfig(family=family, **SMALL_MODEL),
        train=TrainConfig(**train),
    )


def _frame(config):
    return generate_synthetic(config.synthetic)


def _prepared(config):
    return prepare_task(_frame(config), config.task, config.fractions, config.wavelet)


def _model(config, prepared):
    arch = architecture_for(config.model, len(prepared.train.channel_names), config.task.window_length)
    return build_model(arch, config.train.seed)


def _param(value, grad):
    p = Tensor(np.array(value, dtype=float), requires_grad=True)
    p.grad = np.array(grad, dtype=float)
    return p


class TestSgdStep:
    def test_zero_learning_rate(self):
        p = _param([1.0, -2.0], [3.0, 4.0])
        sgd_step({"p": p}, lr=0.0)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_scalar_update(self):
        p = _param(1.0, 2.0)
        sgd_step({"p": p}, lr=0.1)
        assert p.data == pytest.approx(0.8, abs=1e-15)
        assert p.grad is None

    def test_global_norm_clipping(self):
        p = _param([0.0, 0.0], [6.0, 8.0])
        norm = sgd_step({"p": p}, lr=0.1, clip_norm=5.0)
        assert norm == pytest.approx(10.0)
        np.testing.assert_allclose(p.data, [-0.3, -0.4], atol=1e-15)

    def test_clipping_spans_all_parameters(self):
        a, b = _param([0.0], [6.0]), _param([0.0], [8.0])
        sgd_step({"a": a, "b": b}, lr=1.0, clip_norm=5.0)
        np.testing.assert_allclose([a.data[0], b.data[0]], [-3.0, -4.0], atol=1e-15)

    def test_clip_below_norm_is_bit_identical(self):
        rng = np.random.default_rng(0)
        grads = rng.standard_normal(5)
        a, b = _param(np.ones(5), grads), _param(np.ones(5), grads)
        sgd_step({"p": a}, lr=0.01, clip_norm=1e6)
        sgd_step({"p": b}, lr=0.01, clip_norm=None)
        np.testing.assert_array_equal(a.data, b.data)

    def test_missing_gradient_is_skipped(self):
        p = Tensor(np.ones(2), requires_grad=True)
        sgd_step({"p": p}, lr=1.0)
        np.testing.assert_array_equal(p.data, [1.0, 1.0])

    def test_non_finite_gradient(self):
        p = Tensor(np.ones(2), requires_grad=True)
        p.grad = np.array([1.0, np.nan])
        with pytest.raises(NumericError, match="'p'"):
            sgd_step({"p": p}, lr=0.1)

    def test_explicit_gradients(self):
        a = _param([1.0, 1.0], [100.0, 100.0])
        b = Tensor(np.array([2.0]), requires_grad=True)
        norm = sgd_step({"a": a, "b": b}, lr=0.5, clip_norm=None, grads={"b": np.array([4.0])})
        assert norm == 4.0
        np.testing.assert_array_equal(a.data, [1.0, 1.0])
        np.testing.assert_array_equal(b.data, [0.0])
        assert a.grad is None

    def test_explicit_gradients_are_checked(self):
        p = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(ShapeError):
            sgd_step({"p": p}, lr=0.1, grads={"p": np.ones(3)})
        with pytest.raises(ConfigError):
            sgd_step({"p": p}, lr=0.1, grads={"q": np.ones(2)})


class TestMinibatches:
    def test_partition_with_partial_batch(self):
        batches = minibatches(10, 4, seed=0, epoch=1)
        assert [len(b) for b in batches] == [4, 4, 2]
        assert sorted(np.concatenate(batches).tolist()) == list(range(10))

    def test_seeded_per_epoch(self):
        a = np.concatenate(minibatches(50, 8, seed=3, epoch=1))
        b = np.concatenate(minibatches(50, 8, seed=3, epoch=1))
        c = np.concatenate(minibatches(50, 8, seed=3, epoch=2))
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)


class TestTrainRecord:
    def _record(self):
        return TrainRecord(
            label="x",
            epochs=[EpochStats(1, 0.1 / 3, 0.2 / 7, 1.5), EpochStats(2, 1e-17 + 0.01, math.pi, 0.25)],
        )

    def test_csv_round_trip(self, tmp_path):
        rec = self._record()
        rec.to_csv(tmp_path / "record.csv")
        back = TrainRecord.from_csv(tmp_path / "record.csv", label="x")
        assert back.same_trajectory(rec)
        assert back.epochs[0].train_loss == rec.epochs[0].train_loss

    def test_timings_ignored(self):
        a, b = self._record(), self._record()
        b.epochs[0] = dataclasses.replace(b.epochs[0], seconds=99.0)
        assert a.same_trajectory(b)
        b.epochs[1] = dataclasses.replace(b.epochs[1], val_loss=3.0)
        assert not a.same_trajectory(b)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            TrainRecord.from_csv(tmp_path / "nope.csv")


class TestMovingAverage:
    def test_values(self):
        np.testing.assert_allclose(moving_average([1, 2, 3, 4, 5, 6]), [3.0, 4.0])
        np.testing.assert_array_equal(moving_average([1.0, 2.0], window=1), [1.0, 2.0])

    def test_errors(self):
        with pytest.raises(ConfigError):
            moving_average([1.0], window=0)
        with pytest.raises(DataError):
            moving_average([1.0, 2.0], window=5)


class TestPretrain:
    def test_loss_decreases(self):
        rng = np.random.default_rng(0)
        t = np.arange(6)[None, :, None] + rng.integers(0, 24, (32, 1, 1))
        windows = np.concatenate([0.5 + 0.4 * np.sin(2 * np.pi * t / 24.0), np.full_like(t, 0.3, dtype=float)], axis=2)
        ed = EncoderDecoderParams.init(2, (4, 3), np.random.default_rng(1))
        record = pretrain_autoencoder(ed, windows, TrainConfig(learning_rate=0.1, batch_size=8), epochs=20)
        assert len(record) == 20
        assert record.epochs[-1].train_loss < record.epochs[0].train_loss
        assert reconstruction_error(ed, windows) < record.epochs[0].train_loss

    def test_memorizes_constant_window(self):
        windows = np.full((1, 5, 2), 0.5)
        ed = EncoderDecoderParams.init(2, (3, 2), np.random.default_rng(2))
        before = reconstruction_error(ed, windows)
        pretrain_autoencoder(ed, windows, TrainConfig(learning_rate=0.1, clip_norm=None), epochs=100)
        assert reconstruction_error(ed, windows) < 1e-2 * before

    def test_validation_tracked(self):
        windows = np.random.default_rng(3).uniform(0, 1, (8, 4, 2))
        ed = EncoderDecoderParams.init(2, (3, 2), np.random.default_rng(4))
        record = pretrain_autoencoder(ed, windows, TrainConfig(), val_windows=windows[:2], epochs=2)
        assert np.all(np.isfinite(record.val_losses))
        assert record.epochs[-1].val_loss == reconstruction_error(ed, windows[:2])

    def test_rejects_bad_input(self):
        ed = EncoderDecoderParams.init(2, (3, 2), np.random.default_rng(5))
        with pytest.raises(DataError):
            pretrain_autoencoder(ed, np.zeros((0, 4, 2)), TrainConfig())
        with pytest.raises(DataError):
            pretrain_autoencoder(ed, np.zeros((4, 2)), TrainConfig())
        with pytest.raises(ConfigError):
            pretrain_autoencoder(ed, np.zeros((1, 4, 2)), TrainConfig(), epochs=0)


class TestTrainPredictor:
    def test_zero_learning_rate_keeps_parameters(self):
        config = _config("lstm", learning_rate=0.0)
        prepared = _prepared(config)
        model = _model(config, prepared)
        before = model.state_dict()
        train_predictor(model, prepared.train, prepared.val, config.train)
        for name, values in model.state_dict().items():
            np.testing.assert_array_equal(values, before[name])

    def test_reproducible(self):
        config = _config("gru")
        prepared = _prepared(config)
        runs = []
        for _ in range(2):
            model = _model(config, prepared)
            runs.append((train_predictor(model, prepared.train, prepared.val, config.train), model.state_dict()))
        (rec_a, state_a), (rec_b, state_b) = runs
        assert rec_a.same_trajectory(rec_b)
        for name in state_a:
            np.testing.assert_array_equal(state_a[name], state_b[name])

    def test_clipping_invariance(self):
        prepared = _prepared(_config("mlp"))
        records = []
        for clip in (1e9, None):
            config = _config("mlp", clip_norm=clip)
            records.append(train_predictor(_model(config, prepared), prepared.train, prepared.val, config.train))
        assert records[0].same_trajectory(records[1])

    def test_best_state_matches_best_epoch(self):
        config = _config("lstm", epochs=3)
        prepared = _prepared(config)
        model = _model(config, prepared)
        record = train_predictor(model, prepared.train, prepared.val, config.train)
        assert len(record) == 3
        assert record.best_epoch == int(np.argmin(record.val_losses)) + 1
        model.load_state_dict(model.best_state)
        assert dataset_loss(model, prepared.val) == record.val_losses.min()

    def test_persistence_skips_training(self):
        config = _config("persistence")
        prepared = _prepared(config)
        model = _model(config, prepared)
        record = train_predictor(model, prepared.train, prepared.val, config.train)
        assert len(record) == 0
        assert model.best_state == {}
        assert math.isfinite(record.initial_val_loss)

    def test_freeze_encoder_leaves_encoder_untouched(self):
        config = _config(freeze_encoder=True)
        prepared = _prepared(config)
        model = _model(config, prepared)
        before = model.state_dict()
        train_predictor(model, prepared.train, prepared.val, config.train, epochs=1)
        after = model.state_dict()
        for name in before:
            if name.startswith("ed."):
                np.testing.assert_array_equal(after[name], before[name])
        assert not np.array_equal(after["head.W_s"], before["head.W_s"])


class TestEvaluateSplit:
    def test_trace_matches_windows(self):
        config = _config("persistence")
        prepared = _prepared(config)
        model = _model(config, prepared)
        report, trace = evaluate_split(model, prepared.test, prepared.norm)
        assert len(trace) == len(prepared.test) == report.n_samples
        assert list(trace.columns) == ["t", "actual", "predicted"]
        np.testing.assert_array_equal(trace["actual"].to_numpy(), prepared.test.observed)
        again, _ = evaluate_split(model, prepared.test, prepared.norm)
        assert again.metrics() == report.metrics()


class TestPipeline:
    def test_fit_runs_end_to_end(self):
        config = _config()
        result = fit(config, _frame(config))
        assert result.pretrain_record is not None and len(result.pretrain_record) == 1
        assert len(result.record) == 2
        assert result.record.test_metrics == result.report.metrics()
        assert result.meta["config_hash"] == config.config_hash()
        assert len(result.trace) == len(result.prepared.test)

    def test_fit_is_reproducible(self):
        config = _config()
        frame = _frame(config)
        a, b = fit(config, frame), fit(config, frame)
        assert a.record.same_trajectory(b.record)
        assert a.pretrain_record.same_trajectory(b.pretrain_record)
        for name, values in a.model.state_dict().items():
            np.testing.assert_array_equal(values, b.model.state_dict()[name])

    def test_ablation_configs(self):
        base = _config()
        assert ablation_config(base, "full").model.family == "wt-ed-lstm-am"
        no_wt = ablation_config(base, "no_wavelet")
        assert no_wt.model.family == "ed-lstm-am" and not no_wt.wavelet.enabled
        no_am = ablation_config(base, "no_attention")
        assert no_am.model.family == "wt-ed-lstm" and no_am.train.disable_attention
        assert no_am.wavelet.enabled
        with pytest.raises(ConfigError):
            ablation_config(base, "no_encoder")

    def test_run_ablation_labels_report(self):
        config = _config()
        report = run_ablation("no_attention", _frame(config), config)
        assert report.label == "no_attention"

    def test_persistence_repeats_raw_observation(self):
        config = _config("persistence", hours=480, noise=0.05)
        assert not config.wavelet.enabled
        result = fit(config, _frame(config))
        # horizon 1, stride 1: each forecast is the previous target's raw value
        predicted = result.trace["predicted"].to_numpy()
        actual = result.trace["actual"].to_numpy()
        np.testing.assert_allclose(predicted[1:], actual[:-1], rtol=0, atol=1e-12)

    def test_persistence_error_grows_with_horizon(self):
        medians = []
        for horizon in (1, 2, 3, 6):
            rmses = []
            for data_seed in range(3):
                base = _config("persistence", hours=480, noise=0.02)
                config = dataclasses.replace(
                    base,
                    task=TaskSpec("small", window_length=6, horizon=horizon, stride=1),
                    synthetic=dataclasses.replace(base.synthetic, seed=data_seed),
                )
                rmses.append(fit(config, _frame(config)).report.rmse_abs)
            medians.append(float(np.median(rmses)))
        assert medians == sorted(medians), medians

    def test_variants_differ_under_noise(self):
        config = _config(noise=0.05)
        frame = _frame(config)
        full = fit(ablation_config(config, "full"), frame)
        no_wt = fit(ablation_config(config, "no_wavelet"), frame)
        assert any(not np.array_equal(v, no_wt.model.state_dict()[k]) for k, v in full.model.state_dict().items())


@pytest.mark.slow
class TestTrainingProtocol:
    @pytest.mark.parametrize("family", ["wt-ed-lstm-am", "lstm", "gru", "mlp"])
    def test_smoothed_loss_falls(self, family):
        config = _config(family, epochs=30, pretrain_epochs=10, hours=480)
        record = fit(config, _frame(config)).record
        smoothed = moving_average(record.train_losses, 5)
        assert smoothed[-1] < smoothed[0]
        assert record.val_losses[-1] <= record.initial_val_loss

    def test_noiseless_wavelet_ablation_is_close(self):
        config = _config(epochs=20, pretrain_epochs=5, hours=480, noise=0.0)
        frame = _frame(config)
        full = run_ablation("full", frame, config)
        bare = run_ablation("no_wavelet", frame, config)
        assert abs(full.rmse_abs - bare.rmse_abs) < 0.5 * max(full.rmse_abs, bare.rmse_abs)

    def test_ablation_variants_cover_all(self):
        config = _config(epochs=5, pretrain_epochs=2)
        frame = _frame(config)
        labels = [run_ablation(v, frame, config).label for v in ABLATION_VARIANTS]
        assert labels == list(ABLATION_VARIANTS)

    def test_full_size_configuration(self):
        # lr 0.001, batch 32, 100 epochs, encoder 128/32, predictor 128, 90 days of hours
        config = RunConfig(synthetic=SyntheticConfig(), task=TaskSpec("1step", 15, 1, 1))
        assert config.train.learning_rate == 0.001 and config.train.batch_size == 32
        assert config.train.epochs == 100 and config.model.encoder_sizes == (128, 32)
        result = fit(config, _frame(config))
        assert len(result.record) == 100
        assert np.all(np.isfinite(result.record.train_losses))
        smoothed = moving_average(result.record.train_losses, 5)
        assert smoothed[-1] < smoothed[0]
        assert math.isfinite(result.report.rmse_abs)
