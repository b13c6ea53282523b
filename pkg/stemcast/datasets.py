# datasets.py
"""
Hourly SDV data: ingestion, synthetic generation, min-max scaling,
chronological splits and sliding windows.

Window convention: window i covers hours [i*s, i*s + T) and its target is
the SDV value at hour i*s + T + k - 1, i.e. k hours after the last input.
Inputs carry every channel (covariates first, SDV last).
"""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import SyntheticConfig, TaskSpec, WaveletConfig
from .errors import DataError
from .wavelet import denoise_with

logger = logging.getLogger("stemcast.datasets")

TARGET = "sdv"
TIMESTAMP = "timestamp"
TIME_FORMAT = "%Y-%m-%dT%H:%M:%S"
HOUR = np.timedelta64(1, "h")


@dataclass
class TimeSeriesFrame:
    timestamps: np.ndarray  # datetime64[s], strictly hourly
    channels: Dict[str, np.ndarray]
    target: np.ndarray
    target_name: str = TARGET

    def __post_init__(self):
        n = len(self.timestamps)
        for name, values in self.channels.items():
            if len(values) != n:
                raise DataError(f"Channel '{name}' has {len(values)} values, expected {n}")
        if len(self.target) != n:
            raise DataError(f"Target has {len(self.target)} values, expected {n}")

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def channel_names(self) -> List[str]:
        return list(self.channels)

    @property
    def all_names(self) -> List[str]:
        return self.channel_names + [self.target_name]

    def column(self, name: str) -> np.ndarray:
        if name == self.target_name:
            return self.target
        if name not in self.channels:
            raise DataError(f"Unknown channel '{name}'")
        return self.channels[name]

    def matrix(self) -> np.ndarray:
        """(n, M) array with covariates first and the target last."""
        return np.column_stack([self.column(name) for name in self.all_names])

    def slice(self, start: int, stop: int) -> "TimeSeriesFrame":
        return TimeSeriesFrame(
            timestamps=self.timestamps[start:stop].copy(),
            channels={k: v[start:stop].copy() for k, v in self.channels.items()},
            target=self.target[start:stop].copy(),
            target_name=self.target_name,
        )

    def map_columns(self, fn) -> "TimeSeriesFrame":
        return TimeSeriesFrame(
            timestamps=self.timestamps.copy(),
            channels={k: fn(k, v) for k, v in self.channels.items()},
            target=fn(self.target_name, self.target),
            target_name=self.target_name,
        )

    def to_dataframe(self) -> pd.DataFrame:
        df = pd.DataFrame({TIMESTAMP: pd.to_datetime(self.timestamps).strftime(TIME_FORMAT)})
        for name in self.all_names:
            df[name] = self.column(name)
        return df


def concat_frames(frames: Sequence[TimeSeriesFrame]) -> TimeSeriesFrame:
    first = frames[0]
    return TimeSeriesFrame(
        timestamps=np.concatenate([f.timestamps for f in frames]),
        channels={k: np.concatenate([f.channels[k] for f in frames]) for k in first.channels},
        target=np.concatenate([f.target for f in frames]),
        target_name=first.target_name,
    )


# ---------------------------------------------------------
# CSV
# ---------------------------------------------------------
def load_csv(path) -> TimeSeriesFrame:
    """Read `timestamp,<channel...>,sdv`; reject gaps, duplicates and bad numbers."""
    p = Path(path)
    if not p.is_file():
        raise DataError(f"Data file does not exist: {path}")
    try:
        df = pd.read_csv(p, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as e:
        raise DataError(f"{path}: empty file") from e
    except pd.errors.ParserError as e:
        raise DataError(f"{path}: malformed CSV: {e}") from e
    except UnicodeDecodeError as e:
        raise DataError(f"{path}: not valid UTF-8 (byte offset {e.start})") from e
    if TIMESTAMP not in df.columns or TARGET not in df.columns:
        raise DataError(f"{path}: header must contain '{TIMESTAMP}' and '{TARGET}', got {list(df.columns)}")
    if df.empty:
        raise DataError(f"{path}: no data rows")

    stamps = pd.to_datetime(df[TIMESTAMP], format="ISO8601", errors="coerce")
    bad = np.flatnonzero(stamps.isna().to_numpy())
    if bad.size:
        raise DataError(f"{path}: unparseable timestamp at row {int(bad[0])}: {df[TIMESTAMP].iloc[bad[0]]!r}")
    times = stamps.to_numpy().astype("datetime64[s]")
    steps = np.diff(times)
    off = np.flatnonzero(steps != HOUR)
    if off.size:
        row = int(off[0]) + 1
        kind = "duplicated" if steps[off[0]] == np.timedelta64(0, "s") else "non-hourly"
        raise DataError(f"{path}: {kind} timestamp at row {row}: {df[TIMESTAMP].iloc[row]!r}")

    columns = {}
    for name in [c for c in df.columns if c != TIMESTAMP]:
        try:
            # str -> float64 is correctly rounded; to_numeric may drop the last ulp
            values = df[name].astype(np.float64).to_numpy()
        except ValueError:
            values = pd.to_numeric(df[name], errors="coerce").to_numpy(dtype=np.float64)
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            raise DataError(f"{path}: unparseable value in column '{name}' at row {int(bad[0])}")
        columns[name] = values
    target = columns.pop(TARGET)
    logger.info("Loaded %d hourly rows with channels %s from %s", len(times), list(columns), path)
    return TimeSeriesFrame(timestamps=times, channels=columns, target=target)


def write_csv(frame: TimeSeriesFrame, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_dataframe().to_csv(path, index=False, lineterminator="\n")


# ---------------------------------------------------------
# Synthetic SDV
# ---------------------------------------------------------
def _hours(config: SyntheticConfig) -> np.ndarray:
    return np.arange(config.n_hours, dtype=np.float64)


def clean_target(config: SyntheticConfig) -> np.ndarray:
    """Noise-free SDV: diurnal sinusoid plus slow growth trend."""
    t = _hours(config)
    return config.amplitude * np.sin(2 * np.pi * t / 24.0) + config.growth_per_hour * t


def ar1_noise(rng: np.random.Generator, n: int, phi: float, sigma: float) -> np.ndarray:
    """Stationary AR(1) with marginal standard deviation ``sigma``."""
    innovations = rng.standard_normal(n) * sigma * math.sqrt(1.0 - phi * phi)
    noise = np.empty(n)
    noise[0] = rng.standard_normal() * sigma
    for i in range(1, n):
        noise[i] = phi * noise[i - 1] + innovations[i]
    return noise


def generate_synthetic(config: SyntheticConfig) -> TimeSeriesFrame:
    """Deterministic stand-in for greenhouse telemetry; a pure function of ``config``."""
    rng = np.random.default_rng(config.seed)
    t = _hours(config)
    day = 2 * np.pi * t / 24.0
    s = config.noise_sigma

    target = clean_target(config) + ar1_noise(rng, config.n_hours, config.ar_coefficient, s)
    channels = {
        "par": 400.0 + 400.0 * np.sin(day - np.pi / 2) + 40.0 * s * rng.standard_normal(config.n_hours),
        "co2": 600.0 + 80.0 * np.sin(day + np.pi / 3) + 8.0 * s * rng.standard_normal(config.n_hours),
        "temperature": 21.0 + 4.0 * np.sin(day - np.pi / 4) + 0.4 * s * rng.standard_normal(config.n_hours),
        "rh": 70.0 + 10.0 * np.sin(day + 3 * np.pi / 4) + 1.0 * s * rng.standard_normal(config.n_hours),
    }
    start = np.datetime64(config.start, "s")
    times = start + np.arange(config.n_hours) * HOUR
    return TimeSeriesFrame(timestamps=times.astype("datetime64[s]"), channels=channels, target=target)


# ---------------------------------------------------------
# Min-max scaling
# ---------------------------------------------------------
@dataclass
class NormalizationParams:
    names: List[str]
    mins: np.ndarray
    maxs: np.ndarray

    @property
    def constant(self) -> np.ndarray:
        return ~(self.maxs > self.mins)

    def index(self, name: str) -> int:
        if name not in self.names:
            raise DataError(f"Unknown channel '{name}' for these normalization parameters")
        return self.names.index(name)

    def to_dict(self) -> Dict:
        return {"names": list(self.names), "mins": self.mins.tolist(), "maxs": self.maxs.tolist()}

    @classmethod
    def from_dict(cls, raw: Dict) -> "NormalizationParams":
        return cls(list(raw["names"]), np.asarray(raw["mins"], dtype=np.float64), np.asarray(raw["maxs"], dtype=np.float64))


def fit_minmax(frame: TimeSeriesFrame, train_fraction: float) -> NormalizationParams:
    """Per-channel extrema over the first floor(train_fraction * n) samples only."""
    if not 0 < train_fraction <= 1:
        raise DataError(f"train_fraction must lie in (0, 1], got {train_fraction}")
    n_train = int(math.floor(train_fraction * len(frame) + 1e-9))
    if n_train == 0:
        raise DataError("Training region is empty; cannot fit min-max scaling")
    names = frame.all_names
    block = frame.matrix()[:n_train]
    params = NormalizationParams(names, block.min(axis=0), block.max(axis=0))
    flagged = [n for n, c in zip(names, params.constant) if c]
    if flagged:
        logger.warning("Constant channels %s map to 0.5", flagged)
    return params


def scale_values(values, params: NormalizationParams, name: str) -> np.ndarray:
    i = params.index(name)
    v = np.asarray(values, dtype=np.float64)
    if params.constant[i]:
        return np.full_like(v, 0.5)
    return (v - params.mins[i]) / (params.maxs[i] - params.mins[i])


def invert_minmax(values, params: NormalizationParams, name: str = TARGET) -> np.ndarray:
    i = params.index(name)
    v = np.asarray(values, dtype=np.float64)
    if params.constant[i]:
        return np.full_like(v, params.mins[i])
    return v * (params.maxs[i] - params.mins[i]) + params.mins[i]


def apply_minmax(frame: TimeSeriesFrame, params: NormalizationParams) -> TimeSeriesFrame:
    """x -> (x - min) / (max - min), no clamping outside the fitted range."""
    return frame.map_columns(lambda name, values: scale_values(values, params, name))


# ---------------------------------------------------------
# Splits and windows
# ---------------------------------------------------------
def split_bounds(n: int, fractions: Sequence[float]) -> List[int]:
    if any(f <= 0 for f in fractions) or abs(math.fsum(fractions) - 1.0) > 1e-9:
        raise DataError(f"Split fractions must be positive and sum to 1, got {tuple(fractions)}")
    cumulative = np.cumsum(fractions)
    bounds = [0] + [int(math.floor(n * c + 1e-9)) for c in cumulative[:-1]] + [n]
    return bounds


def split(
    frame: TimeSeriesFrame,
    fractions: Sequence[float] = (0.70, 0.10, 0.20),
    min_length: int = 1,
) -> Tuple[TimeSeriesFrame, ...]:
    """Contiguous chronological segments; no shuffling."""
    bounds = split_bounds(len(frame), fractions)
    parts = tuple(frame.slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]))
    for tag, part in zip(("train", "val", "test"), parts):
        if len(part) < min_length:
            raise DataError(f"The {tag} split has {len(part)} hours; at least {min_length} are needed")
    return parts


@dataclass
class WindowedDataset:
    inputs: np.ndarray  # (N, T, M)
    targets: np.ndarray  # (N,)
    last_input_times: np.ndarray
    target_times: np.ndarray
    window_length: int
    horizon: int
    stride: int
    split_tag: str
    channel_names: List[str] = field(default_factory=list)
    observed: Optional[np.ndarray] = None  # raw SDV at target_times, data units

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def target_index(self) -> int:
        return len(self.channel_names) - 1


def window_count(n: int, window_length: int, horizon: int, stride: int) -> int:
    return (n - window_length - horizon) // stride + 1


def target_rows(n: int, window_length: int, horizon: int, stride: int) -> np.ndarray:
    return np.arange(window_count(n, window_length, horizon, stride)) * stride + window_length - 1 + horizon


def make_windows(frame: TimeSeriesFrame, window_length: int, horizon: int, stride: int, split_tag: str = "train") -> WindowedDataset:
    n = len(frame)
    if n < window_length + horizon:
        raise DataError(f"Frame of {n} hours is too short for window {window_length} + horizon {horizon}")
    count = window_count(n, window_length, horizon, stride)
    starts = np.arange(count) * stride
    offsets = np.arange(window_length)
    matrix = frame.matrix()
    last = starts + window_length - 1
    target_rows = last + horizon
    return WindowedDataset(
        inputs=matrix[starts[:, None] + offsets[None, :]],
        targets=frame.target[target_rows].copy(),
        last_input_times=frame.timestamps[last].copy(),
        target_times=frame.timestamps[target_rows].copy(),
        window_length=window_length,
        horizon=horizon,
        stride=stride,
        split_tag=split_tag,
        channel_names=frame.all_names,
    )


# ---------------------------------------------------------
# End-to-end preparation
# ---------------------------------------------------------
def denoise_frame(frame: TimeSeriesFrame, config: WaveletConfig) -> TimeSeriesFrame:
    """Denoise every channel independently over the whole series (offline, sees the future)."""
    return frame.map_columns(lambda name, values: denoise_with(values, config))


@dataclass
class PreparedTask:
    train: WindowedDataset
    val: WindowedDataset
    test: WindowedDataset
    norm: NormalizationParams
    task: TaskSpec

    def splits(self) -> Dict[str, WindowedDataset]:
        return {"train": self.train, "val": self.val, "test": self.test}


def prepare_task(
    frame: TimeSeriesFrame,
    task: TaskSpec,
    fractions: Sequence[float] = (0.70, 0.10, 0.20),
    wavelet: Optional[WaveletConfig] = None,
    norm: Optional[NormalizationParams] = None,
) -> PreparedTask:
    """
    denoise (if enabled) -> split -> fit/apply min-max on train -> window each split.

    Each split also keeps the raw (not denoised, not scaled) SDV at its
    target hours in ``observed``; reported metrics are computed against it.
    """
    raw = frame
    if wavelet is not None and wavelet.enabled:
        frame = denoise_frame(frame, wavelet)
    need = task.window_length + task.horizon
    parts = split(frame, fractions, min_length=need)
    raw_parts = split(raw, fractions, min_length=need)
    if norm is None:
        norm = fit_minmax(frame, fractions[0])
    windows = []
    for tag, part, raw_part in zip(("train", "val", "test"), parts, raw_parts):
        ds = make_windows(apply_minmax(part, norm), task.window_length, task.horizon, task.stride, tag)
        ds.observed = raw_part.target[target_rows(len(raw_part), task.window_length, task.horizon, task.stride)]
        windows.append(ds)
    logger.info(
        "Task %s: %d/%d/%d windows (T=%d, k=%d, stride=%d)",
        task.name, len(windows[0]), len(windows[1]), len(windows[2]),
        task.window_length, task.horizon, task.stride,
    )
    return PreparedTask(*windows, norm=norm, task=task)


def with_task(task: TaskSpec, horizon: int) -> TaskSpec:
    return replace(task, name=f"{task.window_length}x{horizon}", horizon=horizon)
