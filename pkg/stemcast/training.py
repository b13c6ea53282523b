# training.py
"""
Optimization loops for stemcast models.

- pretrain_autoencoder: unsupervised reconstruction of each (reversed) window
- train_predictor: supervised MSE on normalized targets, best-validation snapshot
- fit: denoise -> split -> normalize -> window -> pretrain -> train -> evaluate
- run_ablation: the same pipeline with the wavelet or attention part removed

All randomness comes from the training seed: parameter init uses
``default_rng(seed)`` and epoch e shuffles with ``default_rng([seed, e])``.
"""

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from . import config as cfg
from . import ndmath as nd
from .config import RunConfig, TrainConfig
from .datasets import NormalizationParams, PreparedTask, TimeSeriesFrame, WindowedDataset, invert_minmax, prepare_task
from .errors import ConfigError, DataError, NumericError, ShapeError
from .metrics import EvalReport, evaluate
from .models import (
    AttentionForecaster,
    EncoderDecoderParams,
    Forecaster,
    architecture_for,
    as_sequence,
    build_model,
    reconstruction_loss,
)
from .ndmath import Tensor

logger = logging.getLogger("stemcast.training")

ABLATION_VARIANTS = ("full", "no_wavelet", "no_attention")
EVAL_BATCH = 256


# ---------------------------------------------------------
# Telemetry
# ---------------------------------------------------------
@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class TrainRecord:
    """One entry per completed epoch. ``seconds`` is wall clock and never compared."""

    label: str = ""
    epochs: List[EpochStats] = field(default_factory=list)
    initial_val_loss: float = math.nan
    best_epoch: Optional[int] = None
    test_metrics: Dict[str, float] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.epochs)

    @property
    def train_losses(self) -> np.ndarray:
        return np.array([e.train_loss for e in self.epochs])

    @property
    def val_losses(self) -> np.ndarray:
        return np.array([e.val_loss for e in self.epochs])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [dataclasses.astuple(e) for e in self.epochs],
            columns=["epoch", "train_loss", "val_loss", "seconds"],
        )

    def to_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, lineterminator="\n", float_format="%.17g")

    @classmethod
    def from_csv(cls, path, label: str = "") -> "TrainRecord":
        p = Path(path)
        if not p.is_file():
            raise DataError(f"Train record does not exist: {path}")
        df = pd.read_csv(p, float_precision="round_trip")
        epochs = [
            EpochStats(int(row.epoch), float(row.train_loss), float(row.val_loss), float(row.seconds))
            for row in df.itertuples(index=False)
        ]
        return cls(label=label, epochs=epochs)

    def same_trajectory(self, other: "TrainRecord") -> bool:
        """Bit-equal losses epoch by epoch, ignoring timings."""
        if len(self) != len(other):
            return False
        return all(
            a.epoch == b.epoch
            and a.train_loss == b.train_loss
            and (a.val_loss == b.val_loss or (math.isnan(a.val_loss) and math.isnan(b.val_loss)))
            for a, b in zip(self.epochs, other.epochs)
        )


def moving_average(values, window: int = 5) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if window < 1:
        raise ConfigError(f"moving-average window must be >= 1, got {window}")
    if len(v) < window:
        raise DataError(f"moving average over {window} needs at least {window} values, got {len(v)}")
    return np.convolve(v, np.full(window, 1.0 / window), mode="valid")


# ---------------------------------------------------------
# SGD
# ---------------------------------------------------------
def minibatches(n: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    """Seeded permutation of range(n) cut into batches; the last partial batch is kept."""
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    total = 0.0
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"Non-finite gradient in parameter '{name}'")
        total += float(np.sum(g * g))
    return math.sqrt(total)


def sgd_step(
    params: Mapping[str, Tensor],
    lr: float,
    clip_norm: Optional[float] = None,
    grads: Optional[Mapping[str, np.ndarray]] = None,
) -> float:
    """
    theta <- theta - lr * g, with g rescaled to clip_norm when its global
    norm exceeds it. ``grads`` defaults to each parameter's accumulated
    ``.grad``; parameters without a gradient are left alone. Gradients are
    zeroed afterwards. Returns the pre-clip norm.
    """
    if grads is None:
        grads = {name: p.grad for name, p in params.items() if p.grad is not None}
    unknown = set(grads) - set(params)
    if unknown:
        raise ConfigError(f"Gradients for unknown parameters: {sorted(unknown)}")
    norm = global_norm(grads)
    factor = clip_norm / norm if clip_norm is not None and norm > clip_norm else None
    for name, g in grads.items():
        p = params[name]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"Gradient for '{name}' has shape {g.shape}, expected {p.shape}")
        p.data -= lr * (g * factor if factor is not None else g)
    for p in params.values():
        p.zero_grad()
    return norm


def _run_epochs(
    label: str,
    params: Mapping[str, Tensor],
    all_params: Mapping[str, Tensor],
    n: int,
    batch_loss: Callable[[np.ndarray], Tensor],
    val_loss: Callable[[], float],
    config: TrainConfig,
    epochs: int,
    on_epoch: Optional[Callable[[EpochStats], None]] = None,
) -> TrainRecord:
    record = TrainRecord(label=label, initial_val_loss=val_loss())
    bar = tqdm(range(1, epochs + 1), desc=f"[{label}]", disable=not cfg.PROGRESS, leave=False)
    for epoch in bar:
        start = time.perf_counter()
        weighted = 0.0
        for b, idx in enumerate(minibatches(n, config.batch_size, config.seed, epoch)):
            with nd.Tape() as tape:
                loss = batch_loss(idx)
            try:
                tape.backward(loss)
                sgd_step(params, config.learning_rate, config.clip_norm)
            except NumericError as e:
                raise NumericError(f"{label}: epoch {epoch}, batch {b}: {e}") from e
            nd.zero_grads(all_params.values())
            weighted += loss.item() * len(idx)
        stats = EpochStats(epoch, weighted / n, val_loss(), time.perf_counter() - start)
        record.epochs.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
        bar.set_postfix(train=f"{stats.train_loss:.3e}", val=f"{stats.val_loss:.3e}")
        logger.debug("%s epoch %d: train %.6g val %.6g", label, epoch, stats.train_loss, stats.val_loss)
    bar.close()
    return record


# ---------------------------------------------------------
# Pretraining
# ---------------------------------------------------------
def reconstruction_error(ed: EncoderDecoderParams, windows: np.ndarray) -> float:
    if len(windows) == 0:
        return math.nan
    total = 0.0
    for start in range(0, len(windows), EVAL_BATCH):
        chunk = windows[start : start + EVAL_BATCH]
        total += reconstruction_loss(ed, as_sequence(chunk)).item() * len(chunk)
    return total / len(windows)


def pretrain_autoencoder(
    ed: EncoderDecoderParams,
    windows: np.ndarray,
    config: TrainConfig,
    val_windows: Optional[np.ndarray] = None,
    epochs: Optional[int] = None,
) -> TrainRecord:
    """Minimize reconstruction MSE of (B, T, M) windows; updates ``ed`` in place."""
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3 or len(windows) == 0:
        raise DataError(f"pretraining needs at least one (T, M) window, got array of shape {windows.shape}")
    epochs = config.pretrain_epochs if epochs is None else epochs
    if epochs < 1:
        raise ConfigError(f"pretraining epochs must be >= 1, got {epochs}")
    params = ed.parameters()
    held_out = val_windows if val_windows is not None else np.zeros((0,) + windows.shape[1:])

    record = _run_epochs(
        "pretrain",
        params,
        params,
        len(windows),
        lambda idx: reconstruction_loss(ed, as_sequence(windows[idx])),
        lambda: reconstruction_error(ed, held_out),
        config,
        epochs,
    )
    logger.info(
        "Pretrained encoder-decoder for %d epochs: reconstruction %.6g -> %.6g",
        epochs, record.epochs[0].train_loss, record.epochs[-1].train_loss,
    )
    return record


# ---------------------------------------------------------
# Predictor training
# ---------------------------------------------------------
def dataset_loss(model: Forecaster, dataset: WindowedDataset) -> float:
    """MSE on normalized targets."""
    if len(dataset) == 0:
        return math.nan
    diff = model.predict(dataset.inputs, EVAL_BATCH) - dataset.targets
    return float(np.mean(diff * diff))


def train_predictor(
    model: Forecaster,
    train: WindowedDataset,
    val: Optional[WindowedDataset],
    config: TrainConfig,
    epochs: Optional[int] = None,
) -> TrainRecord:
    """
    Supervised training of every trainable parameter (encoder excluded when
    ``freeze_encoder``). The parameters of the epoch with the lowest
    validation loss are kept in ``model.best_state``; the model itself ends
    with the final-epoch parameters.
    """
    if len(train) == 0:
        raise DataError("train_predictor needs at least one training window")
    epochs = config.epochs if epochs is None else epochs
    params = model.trainable(config.freeze_encoder)
    monitor = val if val is not None and len(val) else train

    if not params:
        record = TrainRecord(label=model.family, initial_val_loss=dataset_loss(model, monitor))
        model.best_state = model.state_dict()
        logger.info("%s has no parameters; skipping training", model.family)
        return record

    targets = train.targets[:, None]

    def batch_loss(idx: np.ndarray) -> Tensor:
        out = model.forward(as_sequence(train.inputs[idx]))
        return nd.mean(nd.square(out - Tensor(targets[idx])))

    best = {"loss": math.inf}

    def keep_best(stats: EpochStats) -> None:
        if stats.val_loss < best["loss"]:
            best["loss"] = stats.val_loss
            best["epoch"] = stats.epoch
            model.best_state = model.state_dict()

    record = _run_epochs(
        model.family,
        params,
        model.parameters(),
        len(train),
        batch_loss,
        lambda: dataset_loss(model, monitor),
        config,
        epochs,
        on_epoch=keep_best,
    )
    record.best_epoch = best.get("epoch")
    logger.info(
        "Trained %s for %d epochs: val loss %.6g -> %.6g (best at epoch %s)",
        model.family, epochs, record.initial_val_loss, record.epochs[-1].val_loss, record.best_epoch,
    )
    return record


# ---------------------------------------------------------
# Evaluation
# ---------------------------------------------------------
def evaluate_split(
    model: Forecaster,
    dataset: WindowedDataset,
    norm: NormalizationParams,
    epsilon: float = 1e-8,
    bins: int = 40,
    label: str = "",
) -> Tuple[EvalReport, pd.DataFrame]:
    """Denormalized predictions against the observed SDV; returns the report and a `t,actual,predicted` trace."""
    predicted = invert_minmax(model.predict(dataset.inputs, EVAL_BATCH), norm)
    actual = dataset.observed if dataset.observed is not None else invert_minmax(dataset.targets, norm)
    report = evaluate(actual, predicted, epsilon=epsilon, horizon=dataset.horizon, bins=bins, label=label or model.family)
    trace = pd.DataFrame(
        {
            "t": pd.to_datetime(dataset.target_times).strftime("%Y-%m-%dT%H:%M:%S"),
            "actual": actual,
            "predicted": predicted,
        }
    )
    return report, trace


# ---------------------------------------------------------
# Pipelines
# ---------------------------------------------------------
@dataclass
class RunResult:
    config: RunConfig
    model: Forecaster
    prepared: PreparedTask
    record: TrainRecord
    pretrain_record: Optional[TrainRecord]
    report: EvalReport
    trace: pd.DataFrame
    meta: Dict


def checkpoint_meta(config: RunConfig, prepared: PreparedTask) -> Dict:
    return {
        "norm": prepared.norm.to_dict(),
        "wavelet": dataclasses.asdict(config.wavelet),
        "task": dataclasses.asdict(config.task),
        "fractions": list(config.fractions),
        "seed": config.train.seed,
        "epsilon": config.epsilon,
        "bins": config.bins,
        "config_hash": config.config_hash(),
    }


def fit(config: RunConfig, frame: TimeSeriesFrame) -> RunResult:
    prepared = prepare_task(frame, config.task, config.fractions, config.wavelet)
    arch = architecture_for(config.model, len(prepared.train.channel_names), config.task.window_length)
    model = build_model(arch, config.train.seed)

    pretrain_record = None
    if isinstance(model, AttentionForecaster):
        pretrain_record = pretrain_autoencoder(model.params.ed, prepared.train.inputs, config.train, prepared.val.inputs)
    record = train_predictor(model, prepared.train, prepared.val, config.train)

    report, trace = evaluate_split(model, prepared.test, prepared.norm, config.epsilon, config.bins, model.family)
    record.test_metrics = report.metrics()
    logger.info("%s on %s: test RMSE_abs %.6g, MAE_abs %.6g", model.family, config.task.label, report.rmse_abs, report.mae_abs)
    return RunResult(
        config=config,
        model=model,
        prepared=prepared,
        record=record,
        pretrain_record=pretrain_record,
        report=report,
        trace=trace,
        meta=checkpoint_meta(config, prepared),
    )


def ablation_config(config: RunConfig, variant: str) -> RunConfig:
    """The full model's config with one component removed."""
    if variant not in ABLATION_VARIANTS:
        raise ConfigError(f"Unknown ablation variant '{variant}'. Choose from {ABLATION_VARIANTS}")
    family = {"full": "wt-ed-lstm-am", "no_wavelet": "ed-lstm-am", "no_attention": "wt-ed-lstm"}[variant]
    train = dataclasses.replace(
        config.train,
        disable_wavelet=variant == "no_wavelet",
        disable_attention=variant == "no_attention",
    )
    return dataclasses.replace(
        config,
        model=dataclasses.replace(config.model, family=family),
        train=train,
        wavelet=dataclasses.replace(config.wavelet, enabled=variant != "no_wavelet"),
    )


def run_ablation(variant: str, frame: TimeSeriesFrame, config: RunConfig) -> EvalReport:
    result = fit(ablation_config(config, variant), frame)
    result.report.label = variant
    return result.report
