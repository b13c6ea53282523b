"""Tests for ingestion, synthetic data, scaling, splits and windows."""

import dataclasses

import numpy as np
import pandas as pd
import pytest

from stemcast.config import TASK_PRESETS, SyntheticConfig, TaskSpec, WaveletConfig
from stemcast.datasets import (
    HOUR,
    TimeSeriesFrame,
    apply_minmax,
    clean_target,
    concat_frames,
    fit_minmax,
    generate_synthetic,
    invert_minmax,
    load_csv,
    make_windows,
    prepare_task,
    scale_values,
    split,
    window_count,
    with_task,
    write_csv,
)
from stemcast.errors import ConfigError, DataError


def _frame(n, start="2020-01-01T00:00:00", seed=0):
    rng = np.random.default_rng(seed)
    times = np.datetime64(start, "s") + np.arange(n) * HOUR
    return TimeSeriesFrame(
        timestamps=times,
        channels={"par": rng.uniform(0, 800, n), "temperature": rng.uniform(15, 30, n)},
        target=rng.normal(0, 0.05, n),
    )


def _write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture
def small_frame():
    return _frame(100)


class TestLoadCsv:
    def test_three_rows(self, tmp_path):
        path = _write(
            tmp_path,
            "timestamp,par,sdv\n"
            "2016-03-23T00:00:00,1.5,0.01\n"
            "2016-03-23T01:00:00,2.5,-0.02\n"
            "2016-03-23T02:00:00,3.5,0.03\n",
        )
        frame = load_csv(path)
        assert len(frame) == 3
        assert frame.channel_names == ["par"]
        np.testing.assert_array_equal(frame.target, [0.01, -0.02, 0.03])

    def test_duplicated_timestamp_names_row(self, tmp_path):
        path = _write(
            tmp_path,
            "timestamp,sdv\n2016-03-23T00:00:00,1\n2016-03-23T01:00:00,2\n2016-03-23T01:00:00,3\n",
        )
        with pytest.raises(DataError, match="duplicated timestamp at row 2"):
            load_csv(path)

    def test_gap_rejected(self, tmp_path):
        path = _write(tmp_path, "timestamp,sdv\n2016-03-23T00:00:00,1\n2016-03-23T03:00:00,2\n")
        with pytest.raises(DataError, match="non-hourly timestamp at row 1"):
            load_csv(path)

    def test_bad_number_names_row(self, tmp_path):
        path = _write(tmp_path, "timestamp,sdv\n2016-03-23T00:00:00,1\n2016-03-23T01:00:00,abc\n")
        with pytest.raises(DataError, match="row 1"):
            load_csv(path)

    def test_missing_value_rejected(self, tmp_path):
        path = _write(tmp_path, "timestamp,par,sdv\n2016-03-23T00:00:00,,1\n")
        with pytest.raises(DataError, match="'par' at row 0"):
            load_csv(path)

    def test_missing_columns(self, tmp_path):
        with pytest.raises(DataError, match="header"):
            load_csv(_write(tmp_path, "time,value\n2016-03-23T00:00:00,1\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="does not exist"):
            load_csv(tmp_path / "nope.csv")

    def test_no_rows(self, tmp_path):
        with pytest.raises(DataError, match="no data rows"):
            load_csv(_write(tmp_path, "timestamp,sdv\n"))

    def test_empty_file(self, tmp_path):
        with pytest.raises(DataError, match="empty file"):
            load_csv(_write(tmp_path, ""))

    def test_ragged_row(self, tmp_path):
        path = _write(tmp_path, "timestamp,sdv\n2016-03-23T00:00:00,1\n2016-03-23T01:00:00,2,7,8\n")
        with pytest.raises(DataError, match="malformed CSV"):
            load_csv(path)

    def test_short_row(self, tmp_path):
        path = _write(tmp_path, "timestamp,par,sdv\n2016-03-23T00:00:00,1,2\n2016-03-23T01:00:00,3\n")
        with pytest.raises(DataError, match="'sdv' at row 1"):
            load_csv(path)

    def test_invalid_utf8(self, tmp_path):
        path = tmp_path / "latin.csv"
        path.write_bytes(b"timestamp,sdv\n2016-03-23T00:00:00,\xff\xfe1\n")
        with pytest.raises(DataError, match="UTF-8"):
            load_csv(path)

    def test_values_parse_exactly(self, tmp_path):
        path = _write(tmp_path, "timestamp,sdv\n2016-03-23T00:00:00,0.010039615758421697\n")
        assert load_csv(path).target[0] == float("0.010039615758421697")

    def test_round_trip_is_byte_identical(self, tmp_path):
        first = tmp_path / "a.csv"
        write_csv(generate_synthetic(SyntheticConfig(n_hours=72)), first)
        second = tmp_path / "b.csv"
        write_csv(load_csv(first), second)
        assert first.read_bytes() == second.read_bytes()


class TestSynthetic:
    def test_default_length(self):
        frame = generate_synthetic(SyntheticConfig())
        assert len(frame) == 2160
        assert frame.all_names == ["par", "co2", "temperature", "rh", "sdv"]
        assert str(frame.timestamps[0]) == "2016-03-23T00:00:00"

    def test_deterministic(self):
        a = generate_synthetic(SyntheticConfig(n_hours=200, seed=3))
        b = generate_synthetic(SyntheticConfig(n_hours=200, seed=3))
        np.testing.assert_array_equal(a.matrix(), b.matrix())
        np.testing.assert_array_equal(a.timestamps, b.timestamps)

    def test_seed_changes_noise(self):
        a = generate_synthetic(SyntheticConfig(n_hours=200, seed=1))
        b = generate_synthetic(SyntheticConfig(n_hours=200, seed=2))
        assert not np.array_equal(a.target, b.target)

    def test_noiseless_matches_closed_form(self):
        config = SyntheticConfig(n_hours=96, noise_sigma=0.0)
        t = np.arange(96.0)
        expected = config.amplitude * np.sin(2 * np.pi * t / 24.0) + config.growth_per_hour * t
        np.testing.assert_array_equal(generate_synthetic(config).target, expected)
        np.testing.assert_array_equal(clean_target(config), expected)

    def test_noise_autocorrelation(self):
        config = SyntheticConfig(n_hours=10_000, noise_sigma=0.02, ar_coefficient=0.7, seed=11)
        residual = generate_synthetic(config).target - clean_target(config)
        lag1 = np.corrcoef(residual[:-1], residual[1:])[0, 1]
        assert abs(lag1 - 0.7) < 0.1

    @pytest.mark.parametrize("kwargs", [{"n_hours": 47}, {"noise_sigma": -1.0}, {"ar_coefficient": 1.0}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigError):
            SyntheticConfig(**kwargs)


class TestMinMax:
    def test_full_fraction(self):
        frame = TimeSeriesFrame(
            timestamps=np.datetime64("2020-01-01T00", "s") + np.arange(2) * HOUR,
            channels={"a": np.array([0.0, 10.0])},
            target=np.array([1.0, 3.0]),
        )
        params = fit_minmax(frame, 1.0)
        assert params.mins.tolist() == [0.0, 1.0]
        assert params.maxs.tolist() == [10.0, 3.0]
        assert scale_values([5.0, 12.0], params, "a").tolist() == [0.5, 1.2]

    def test_round_trip(self, small_frame):
        params = fit_minmax(small_frame, 0.7)
        scaled = apply_minmax(small_frame, params)
        for name in small_frame.all_names:
            np.testing.assert_allclose(invert_minmax(scaled.column(name), params, name), small_frame.column(name), atol=1e-12)

    def test_constant_channel(self, small_frame):
        frame = dataclasses.replace(small_frame, channels=dict(small_frame.channels, flat=np.full(100, 3.0)))
        params = fit_minmax(frame, 0.7)
        assert params.constant[params.index("flat")]
        np.testing.assert_array_equal(apply_minmax(frame, params).column("flat"), 0.5)

    def test_fit_uses_training_region_only(self, small_frame):
        params = fit_minmax(small_frame, 0.7)
        changed = small_frame.slice(0, 100)
        changed.target[70:] = 1e6
        changed.channels["par"][85] = -1e6
        other = fit_minmax(changed, 0.7)
        np.testing.assert_array_equal(params.mins, other.mins)
        np.testing.assert_array_equal(params.maxs, other.maxs)

    def test_empty_region(self, small_frame):
        with pytest.raises(DataError):
            fit_minmax(small_frame, 0.001)
        with pytest.raises(DataError):
            fit_minmax(small_frame, 0.0)

    def test_unknown_channel(self, small_frame):
        with pytest.raises(DataError):
            invert_minmax([0.5], fit_minmax(small_frame, 0.7), "humidity")


class TestSplit:
    def test_default_fractions(self, small_frame):
        assert [len(p) for p in split(small_frame)] == [70, 10, 20]

    def test_floor_arithmetic(self):
        assert [len(p) for p in split(_frame(10))] == [7, 1, 2]

    def test_concatenation(self, small_frame):
        joined = concat_frames(split(small_frame))
        np.testing.assert_array_equal(joined.matrix(), small_frame.matrix())
        np.testing.assert_array_equal(joined.timestamps, small_frame.timestamps)

    def test_bad_fractions(self, small_frame):
        with pytest.raises(DataError):
            split(small_frame, (0.5, 0.1, 0.1))
        with pytest.raises(DataError):
            split(small_frame, (0.9, 0.0, 0.1))

    def test_short_split(self, small_frame):
        with pytest.raises(DataError, match="val split"):
            split(small_frame, min_length=16)


class TestWindows:
    @pytest.mark.parametrize(
        "n,T,k,s,count",
        [(20, 15, 1, 1, 5), (24, 6, 6, 6, 3), (16, 15, 1, 1, 1), (27, 12, 12, 12, 1)],
    )
    def test_counts(self, n, T, k, s, count):
        ds = make_windows(_frame(n), T, k, s)
        assert len(ds) == window_count(n, T, k, s) == count
        assert ds.inputs.shape == (count, T, 3)

    def test_alignment_exhaustive(self):
        frame = _frame(200)
        for T, k, s in [(15, 1, 1), (6, 6, 6), (12, 12, 12), (15, 7, 1), (4, 3, 5)]:
            ds = make_windows(frame, T, k, s)
            assert np.all(ds.target_times - ds.last_input_times == k * HOUR)
            for i in range(len(ds)):
                start = i * s
                np.testing.assert_array_equal(ds.inputs[i], frame.matrix()[start : start + T])
                assert ds.targets[i] == frame.target[start + T + k - 1]

    def test_target_channel_last(self):
        frame = _frame(30)
        ds = make_windows(frame, 5, 1, 1)
        assert ds.channel_names[ds.target_index] == "sdv"
        np.testing.assert_array_equal(ds.inputs[:, -1, ds.target_index], frame.target[4 : 4 + len(ds)])

    def test_too_short(self):
        with pytest.raises(DataError):
            make_windows(_frame(15), 15, 1, 1)


class TestPrepareTask:
    def test_splits_do_not_overlap(self):
        frame = generate_synthetic(SyntheticConfig(n_hours=400))
        prepared = prepare_task(frame, TASK_PRESETS["1step"], wavelet=WaveletConfig())
        train, val, test = prepared.train, prepared.val, prepared.test
        span = 14 * HOUR
        assert train.target_times.max() < val.last_input_times.min() - span
        assert val.target_times.max() < test.last_input_times.min() - span
        assert [d.split_tag for d in (train, val, test)] == ["train", "val", "test"]

    def test_observed_targets_are_raw(self):
        frame = generate_synthetic(SyntheticConfig(n_hours=400))
        prepared = prepare_task(frame, TASK_PRESETS["1step"], wavelet=WaveletConfig())
        n_train = 280
        rows = np.arange(len(prepared.val)) + n_train + 15
        np.testing.assert_array_equal(prepared.val.observed, frame.target[rows])
        assert not np.allclose(invert_minmax(prepared.val.targets, prepared.norm), prepared.val.observed)

    def test_without_wavelet_targets_invert_to_observed(self):
        frame = generate_synthetic(SyntheticConfig(n_hours=300))
        prepared = prepare_task(frame, TASK_PRESETS["2step"], wavelet=WaveletConfig(enabled=False))
        np.testing.assert_allclose(invert_minmax(prepared.test.targets, prepared.norm), prepared.test.observed, atol=1e-12)

    def test_train_inputs_within_unit_range(self):
        prepared = prepare_task(generate_synthetic(SyntheticConfig(n_hours=300)), TASK_PRESETS["1step"])
        assert prepared.train.inputs.min() >= 0.0
        assert prepared.train.inputs.max() <= 1.0

    def test_with_task(self):
        task = with_task(TASK_PRESETS["1step"], 7)
        assert (task.window_length, task.horizon, task.stride) == (15, 7, 1)
        assert task.label == "15x7s1"

    def test_presets(self):
        assert TASK_PRESETS["2step"] == TaskSpec("2step", 6, 6, 6)
        assert TASK_PRESETS["3step"] == TaskSpec("3step", 12, 12, 12)


class TestFrame:
    def test_to_dataframe_columns(self, small_frame):
        df = small_frame.to_dataframe()
        assert list(df.columns) == ["timestamp", "par", "temperature", "sdv"]
        assert df["timestamp"].iloc[1] == "2020-01-01T01:00:00"
        assert isinstance(df, pd.DataFrame)

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            TimeSeriesFrame(np.arange(3).astype("datetime64[h]"), {"a": np.zeros(2)}, np.zeros(3))
