# cli.py
"""
Command-line entry point.

    stemcast generate --out data.csv --hours 2160 --noise-sigma 0.01 --seed 0
    stemcast train    --synthetic --task 1step --model wt-ed-lstm-am
    stemcast eval     --checkpoint runs/<run>/checkpoint.npz --split test
    stemcast sweep    --synthetic --horizons 1-12 --models wt-ed-lstm-am,lstm,persistence
    stemcast ablate   --synthetic --seeds 0,1,2,3,4

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from . import config as cfg
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    DENOISE_RULES,
    EXTENSION_MODES,
    MODEL_FAMILIES,
    TASK_PRESETS,
    RunConfig,
    SyntheticConfig,
    TaskSpec,
    WaveletConfig,
    load_config_file,
    preset,
    resolve_run_config,
    setup_logging,
)
from .datasets import NormalizationParams, TimeSeriesFrame, generate_synthetic, load_csv, prepare_task, with_task, write_csv
from .errors import ConfigError, DataError, StemcastError
from .metrics import EvalReport
from .training import ABLATION_VARIANTS, RunResult, ablation_config, evaluate_split, fit

logger = logging.getLogger("stemcast.cli")

DEFAULT_SWEEP_MODELS = ("wt-ed-lstm-am", "lstm", "gru", "mlp", "persistence")
SWEEP_METRICS = ("rmse_abs", "mae_abs", "mse_abs", "rmse_rel", "mae_rel", "mse_rel", "mape")


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as ConfigError instead of exiting with 2."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


# ---------------------------------------------------------
# Flag parsing helpers
# ---------------------------------------------------------
def parse_int_list(text: str) -> List[int]:
    """`1-12` -> 1..12, `1,6,12` -> [1, 6, 12]; ranges and lists may be mixed."""
    values: List[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part:
                lo, hi = (int(x) for x in part.split("-", 1))
                if hi < lo:
                    raise ConfigError(f"Empty range '{part}'")
                values.extend(range(lo, hi + 1))
            elif part:
                values.append(int(part))
    except ValueError as e:
        raise ConfigError(f"Cannot parse integer list '{text}': {e}") from e
    if not values:
        raise ConfigError(f"Integer list '{text}' is empty")
    return values


def parse_models(text: str) -> List[str]:
    names = [m.strip() for m in text.split(",") if m.strip()]
    unknown = [m for m in names if m not in MODEL_FAMILIES]
    if unknown or not names:
        raise ConfigError(f"Unknown model(s) {unknown or text!r}. Choose from {MODEL_FAMILIES}")
    return names


def _clip_value(text: str) -> Optional[float]:
    if text.lower() in ("none", "off", "0"):
        return None
    return float(text)


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data source")
    g.add_argument("--data", help="Hourly CSV with timestamp, covariates and sdv columns")
    g.add_argument("--synthetic", action="store_true", help="Use the built-in synthetic SDV series")
    g.add_argument("--hours", type=int, help="Synthetic series length in hours (default 2160)")
    g.add_argument("--noise-sigma", type=float, help="Synthetic AR(1) noise level (default 0.01)")
    g.add_argument("--data-seed", type=int, help="Synthetic series seed")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its entries")
    p.add_argument("--out", help=f"Output root (default ${{STEMCAST_OUT_DIR}} or '{cfg.OUT_DIR}')")
    p.add_argument("--force", action="store_true", help="Overwrite existing run directories")
    _add_data_flags(p)

    t = p.add_argument_group("task")
    t.add_argument("--task", choices=sorted(TASK_PRESETS), help="Task preset")
    t.add_argument("--window", type=int, help="Window length T in hours")
    t.add_argument("--horizon", type=int, help="Forecast horizon k in hours")
    t.add_argument("--stride", type=int, help="Window stride in hours")

    m = p.add_argument_group("model")
    m.add_argument("--model", choices=MODEL_FAMILIES)
    m.add_argument("--layer-attention", action="store_true", help="Add attention over the encoder annotations")
    m.add_argument("--no-wavelet", action="store_true", help="Skip wavelet denoising")
    m.add_argument("--no-attention", action="store_true", help="Use the last predictor state as context")

    tr = p.add_argument_group("training")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--pretrain-epochs", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--batch", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--clip-norm", type=_clip_value, help="Global gradient-norm limit, or 'none'")
    tr.add_argument("--freeze-encoder", action="store_true", help="Do not update the pretrained encoder")

    w = p.add_argument_group("wavelet")
    w.add_argument("--wavelet", help="Filter bank name (db2, db1, haar)")
    w.add_argument("--wavelet-levels", type=int)
    w.add_argument("--denoise-rule", choices=DENOISE_RULES)
    w.add_argument("--extension", choices=EXTENSION_MODES)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stemcast", description="Wavelet-denoised encoder-decoder LSTM forecasting of stem diameter variation")
    parser.add_argument("--log-level", default=None, help="Logging level (default $STEMCAST_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="Write a synthetic SDV series to CSV", argument_default=argparse.SUPPRESS)
    gen.add_argument("--out", required=True, help="Destination CSV path")
    gen.add_argument("--hours", type=int)
    gen.add_argument("--noise-sigma", type=float)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--start", help="First timestamp, ISO 8601")
    gen.set_defaults(func=cmd_generate)

    train = sub.add_parser("train", help="Train one model and evaluate it on the test split", argument_default=argparse.SUPPRESS)
    _add_run_flags(train)
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="Evaluate a checkpoint on one split", argument_default=argparse.SUPPRESS)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", choices=("train", "val", "test"))
    ev.add_argument("--out", help="Directory for report files (default: the checkpoint's directory)")
    _add_data_flags(ev)
    ev.set_defaults(func=cmd_eval)

    sweep = sub.add_parser("sweep", help="One model per horizon (direct strategy) for several families", argument_default=argparse.SUPPRESS)
    _add_run_flags(sweep)
    sweep.add_argument("--horizons", type=parse_int_list, help="e.g. 1-12 or 1,6,12 (default 1-12)")
    sweep.add_argument("--models", type=parse_models, help=f"Comma-separated families (default {','.join(DEFAULT_SWEEP_MODELS)})")
    sweep.add_argument("--seeds", type=parse_int_list, help="Training seeds (default: --seed)")
    sweep.add_argument("--workers", type=int, help="Parallel worker processes (default $STEMCAST_WORKERS)")
    sweep.set_defaults(func=cmd_sweep)

    ablate = sub.add_parser("ablate", help="Compare full, no_wavelet and no_attention", argument_default=argparse.SUPPRESS)
    _add_run_flags(ablate)
    ablate.add_argument("--seeds", type=parse_int_list, help="Training seeds (default: --seed)")
    ablate.add_argument("--workers", type=int, help="Parallel worker processes (default $STEMCAST_WORKERS)")
    ablate.set_defaults(func=cmd_ablate)
    return parser


# ---------------------------------------------------------
# Flags -> resolved config
# ---------------------------------------------------------
_TRAIN_FLAGS = {
    "epochs": "epochs",
    "pretrain_epochs": "pretrain_epochs",
    "lr": "learning_rate",
    "batch": "batch_size",
    "seed": "seed",
    "clip_norm": "clip_norm",
    "freeze_encoder": "freeze_encoder",
    "no_wavelet": "disable_wavelet",
    "no_attention": "disable_attention",
}
_WAVELET_FLAGS = {"wavelet": "family", "wavelet_levels": "levels", "denoise_rule": "rule", "extension": "extension"}


def _synthetic_overrides(flags: Dict[str, Any]) -> Optional[Dict[str, Any]]:
    keys = {"hours": "n_hours", "noise_sigma": "noise_sigma", "data_seed": "seed"}
    chosen = {dst: flags[src] for src, dst in keys.items() if src in flags}
    if chosen or flags.get("synthetic"):
        return chosen
    return None


def overrides_from_flags(args: argparse.Namespace) -> Dict[str, Any]:
    flags = vars(args)
    out: Dict[str, Any] = {"command": args.command}
    if "data" in flags:
        out["data"] = flags["data"]
    synthetic = _synthetic_overrides(flags)
    if synthetic is not None:
        out["synthetic"] = synthetic
    if "out" in flags:
        out["out_dir"] = flags["out"]

    task: Dict[str, Any] = {}
    if "task" in flags:
        task.update(dataclasses.asdict(preset(flags["task"])))
    for src, dst in (("window", "window_length"), ("horizon", "horizon"), ("stride", "stride")):
        if src in flags:
            task[dst] = flags[src]
            task["name"] = "custom"
    if task:
        out["task"] = task

    model = {}
    if "model" in flags:
        model["family"] = flags["model"]
    if flags.get("layer_attention"):
        model["layer_attention"] = True
    if model:
        out["model"] = model

    train = {dst: flags[src] for src, dst in _TRAIN_FLAGS.items() if src in flags}
    if train:
        out["train"] = train
    wavelet = {dst: flags[src] for src, dst in _WAVELET_FLAGS.items() if src in flags}
    if wavelet:
        out["wavelet"] = wavelet
    return out


def resolve_from_args(args: argparse.Namespace) -> RunConfig:
    file_cfg = load_config_file(getattr(args, "config", None))
    config = resolve_run_config(file_cfg, overrides_from_flags(args))
    if config.data is None and config.synthetic is None:
        raise ConfigError("No data source: pass --data FILE or --synthetic")
    return config


def load_frame(config: RunConfig) -> TimeSeriesFrame:
    if config.data is not None:
        return load_csv(config.data)
    return generate_synthetic(config.synthetic or SyntheticConfig())


# ---------------------------------------------------------
# Run directories
# ---------------------------------------------------------
def run_dir_for(config: RunConfig) -> Path:
    return Path(config.out_dir) / config.run_name


def claim_run_dir(path: Path, force: bool) -> None:
    if (path / "config.json").exists() and not force:
        raise ConfigError(f"Run directory {path} already exists; pass --force to overwrite it")
    path.mkdir(parents=True, exist_ok=True)


def write_report(report: EvalReport, trace: pd.DataFrame, out_dir: Path, split_tag: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"report_{split_tag}.txt").write_text(report.to_table(), encoding="utf-8")
    (out_dir / f"report_{split_tag}.kv").write_text(report.to_keyvalue(), encoding="utf-8")
    trace.to_csv(out_dir / f"predictions_{split_tag}.csv", index=False, lineterminator="\n", float_format="%.17g")
    report.histogram_frame().to_csv(out_dir / f"histogram_{split_tag}.csv", index=False, lineterminator="\n", float_format="%.17g")


def write_run(result: RunResult, path: Path) -> None:
    """Persist everything a run produced; ``path`` must already be claimed."""
    (path / "config.json").write_text(json.dumps(result.config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    save_checkpoint(path / "checkpoint.npz", result.model, result.meta)
    if result.model.best_state is not None:
        save_checkpoint(path / "best.npz", result.model, dict(result.meta, best_epoch=result.record.best_epoch), result.model.best_state)
    result.record.to_csv(path / "train_record.csv")
    if result.pretrain_record is not None:
        result.pretrain_record.to_csv(path / "pretrain_record.csv")
    write_report(result.report, result.trace, path, "test")


def _train_job(config: RunConfig, frame: TimeSeriesFrame, path: Path) -> EvalReport:
    result = fit(config, frame)
    write_run(result, path)
    return result.report


# ---------------------------------------------------------
# Commands
# ---------------------------------------------------------
def cmd_generate(args: argparse.Namespace) -> int:
    flags = vars(args)
    keys = {"hours": "n_hours", "noise_sigma": "noise_sigma", "seed": "seed", "start": "start"}
    config = SyntheticConfig(**{dst: flags[src] for src, dst in keys.items() if src in flags})
    frame = generate_synthetic(config)
    try:
        write_csv(frame, args.out)
    except OSError as e:
        raise DataError(f"Cannot write {args.out}: {e}") from e
    print(f"[generate] Wrote {len(frame)} hours ({len(frame) // 24} days) to {args.out}")
    print(frame.to_dataframe().describe().to_string())
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_from_args(args)
    path = run_dir_for(config)
    claim_run_dir(path, getattr(args, "force", False))
    logger.info("Training %s on %s into %s", config.model.family, config.task.label, path)
    report = _train_job(config, load_frame(config), path)
    print(report.to_table(), end="")
    print(f"[train] Run written to {path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    ckpt_dir = Path(args.checkpoint).parent
    flags = vars(args)
    split_tag = flags.get("split", "test")

    if "data" in flags or _synthetic_overrides(flags) is not None:
        overrides = {"data": flags.get("data")}
        synthetic = _synthetic_overrides(flags)
        overrides["synthetic"] = synthetic
        config = resolve_run_config({}, overrides)
    else:
        saved = ckpt_dir / "config.json"
        if not saved.is_file():
            raise ConfigError(f"No data source given and no config.json next to {args.checkpoint}")
        config = RunConfig.from_dict(json.loads(saved.read_text(encoding="utf-8")))
    if config.data is None and config.synthetic is None:
        raise ConfigError("No data source: pass --data FILE or --synthetic")
    frame = load_frame(config)

    norm = NormalizationParams.from_dict(meta["norm"])
    if frame.all_names != norm.names:
        raise DataError(f"Checkpoint expects channels {norm.names}, data has {frame.all_names}")
    task = TaskSpec(**meta["task"])
    prepared = prepare_task(frame, task, tuple(meta["fractions"]), WaveletConfig(**meta["wavelet"]), norm=norm)
    report, trace = evaluate_split(
        model, prepared.splits()[split_tag], norm, meta.get("epsilon", 1e-8), meta.get("bins", 40), model.family
    )
    out_dir = Path(flags.get("out", ckpt_dir))
    write_report(report, trace, out_dir, split_tag)
    print(report.to_table(), end="")
    print(f"[eval] {len(trace)} predictions written to {out_dir}")
    return 0


def _family_config(base: RunConfig, family: str, horizon: int, seed: int) -> RunConfig:
    raw = base.to_dict()
    raw["model"]["family"] = family
    raw["task"] = dataclasses.asdict(with_task(base.task, horizon))
    raw["train"]["seed"] = seed
    raw["train"]["disable_wavelet"] = False
    raw["train"]["disable_attention"] = False
    return resolve_run_config(raw, {})


def _workers(args: argparse.Namespace) -> int:
    return getattr(args, "workers", cfg.WORKERS)


def cmd_sweep(args: argparse.Namespace) -> int:
    if getattr(args, "no_wavelet", False) or getattr(args, "no_attention", False):
        raise ConfigError("sweep picks components through --models; drop --no-wavelet / --no-attention")
    base = resolve_from_args(args)
    horizons = getattr(args, "horizons", list(range(1, 13)))
    models = getattr(args, "models", list(DEFAULT_SWEEP_MODELS))
    seeds = getattr(args, "seeds", [base.train.seed])
    jobs = [(h, m, s, _family_config(base, m, h, s)) for h in horizons for m in models for s in seeds]
    for *_, config in jobs:
        claim_run_dir(run_dir_for(config), getattr(args, "force", False))

    frame = load_frame(base)
    reports = Parallel(n_jobs=_workers(args))(
        delayed(_train_job)(config, frame, run_dir_for(config))
        for *_, config in tqdm(jobs, desc="[sweep]", disable=not cfg.PROGRESS)
    )
    rows = [
        {"horizon": h, "model": m, "seed": s, **report.metrics(), "n_samples": report.n_samples}
        for (h, m, s, _), report in zip(jobs, reports)
    ]
    table = pd.DataFrame(rows, columns=["horizon", "model", "seed", *SWEEP_METRICS, "n_samples"])
    out = Path(base.out_dir) / "sweep.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out, index=False, lineterminator="\n", float_format="%.17g")
    print(table.to_string(index=False))
    print(f"[sweep] {len(table)} rows written to {out}")
    _report_sweep_ordering(table)
    return 0


def _report_sweep_ordering(table: pd.DataFrame) -> None:
    """Soft check per horizon: full model <= lstm, every learned model <= persistence."""
    for horizon, rows in table.groupby("horizon"):
        medians = rows.groupby("model")["rmse_abs"].median()
        seeds = sorted(rows["seed"].unique().tolist())
        pairs = []
        if "wt-ed-lstm-am" in medians and "lstm" in medians:
            pairs.append(("wt-ed-lstm-am", "lstm"))
        if "persistence" in medians:
            pairs += [(m, "persistence") for m in medians.index if m != "persistence"]
        for better, worse in pairs:
            a, b = float(medians[better]), float(medians[worse])
            if a <= b:
                logger.info("h=%s: median RMSE_abs %s %.6g <= %s %.6g", horizon, better, a, worse, b)
            else:
                logger.warning("h=%s: median RMSE_abs %s %.6g > %s %.6g over seeds %s", horizon, better, a, worse, b, seeds)


def cmd_ablate(args: argparse.Namespace) -> int:
    base = resolve_from_args(args)
    seeds = getattr(args, "seeds", [base.train.seed])
    jobs = [
        (v, s, ablation_config(dataclasses.replace(base, train=dataclasses.replace(base.train, seed=s)), v))
        for s in seeds
        for v in ABLATION_VARIANTS
    ]
    for *_, config in jobs:
        claim_run_dir(run_dir_for(config), getattr(args, "force", False))

    frame = load_frame(base)
    reports = Parallel(n_jobs=_workers(args))(
        delayed(_train_job)(config, frame, run_dir_for(config))
        for *_, config in tqdm(jobs, desc="[ablate]", disable=not cfg.PROGRESS)
    )
    rows = [
        {"variant": v, "seed": s, **r.metrics(), "n_samples": r.n_samples, "run": run_dir_for(config).name}
        for (v, s, config), r in zip(jobs, reports)
    ]
    table = pd.DataFrame(rows)
    out = Path(base.out_dir) / f"ablation-{base.task.label}-{base.config_hash()}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out, index=False, lineterminator="\n", float_format="%.17g")
    print(table.to_string(index=False))
    print(f"[ablate] {len(table)} rows written to {out}")
    _report_ablation_ordering(table)
    return 0


def _report_ablation_ordering(table: pd.DataFrame) -> None:
    medians = table.groupby("variant")["rmse_abs"].median()
    full, no_wavelet = float(medians["full"]), float(medians["no_wavelet"])
    seeds = sorted(table["seed"].unique().tolist())
    if full <= no_wavelet:
        logger.info("Median RMSE_abs full %.6g <= no_wavelet %.6g over seeds %s", full, no_wavelet, seeds)
    else:
        logger.warning("Median RMSE_abs full %.6g > no_wavelet %.6g over seeds %s", full, no_wavelet, seeds)


# ---------------------------------------------------------
# Entry point
# ---------------------------------------------------------
def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        print(f"[stemcast] usage error: {e}", file=sys.stderr)
        return e.exit_code
    except SystemExit as e:  # --help
        return int(e.code or 0)

    setup_logging(args.log_level)
    try:
        return args.func(args)
    except StemcastError as e:
        print(f"[stemcast] {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
