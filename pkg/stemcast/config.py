# config.py
"""
Configuration for stemcast runs.

- Environment variables (.env + system env) provide machine-level defaults.
- A JSON config file may provide any subset of a run configuration.
- Command-line flags override the file; the merged result is the resolved
  config, which is hashed and persisted in every run directory.
"""

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from dotenv import load_dotenv

from .errors import ConfigError

# ---------------------------------------------------------
# Load environment variables (.env + system env)
# ---------------------------------------------------------
load_dotenv()

OUT_DIR: str = os.getenv("STEMCAST_OUT_DIR", "runs")
LOG_LEVEL: str = os.getenv("STEMCAST_LOG_LEVEL", "INFO")
WORKERS: int = int(os.getenv("STEMCAST_WORKERS", "1"))
PROGRESS: bool = os.getenv("STEMCAST_PROGRESS", "1") != "0"

MODEL_FAMILIES = (
    "wt-ed-lstm-am",
    "ed-lstm-am",
    "wt-ed-lstm",
    "lstm",
    "gru",
    "mlp",
    "persistence",
)
ATTENTION_FAMILIES = ("wt-ed-lstm-am", "ed-lstm-am", "wt-ed-lstm")
RAW_INPUT_FAMILIES = ("persistence",)
DENOISE_RULES = ("soft_universal", "hard_universal", "zero_finest")
EXTENSION_MODES = ("symmetric", "periodic")


def setup_logging(level: Optional[str] = None) -> None:
    """Tag every message with its module, e.g. ``[stemcast.training] ...``."""
    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO),
        format="[%(name)s] %(message)s",
        force=True,
    )


# ---------------------------------------------------------
# Structured configuration
# ---------------------------------------------------------
@dataclass(frozen=True)
class WaveletConfig:
    family: str = "db2"
    levels: int = 2
    rule: str = "soft_universal"
    extension: str = "symmetric"
    enabled: bool = True

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError(f"wavelet levels must be >= 1, got {self.levels}")
        if self.rule not in DENOISE_RULES:
            raise ConfigError(f"Unknown denoise rule '{self.rule}'. Choose from {DENOISE_RULES}")
        if self.extension not in EXTENSION_MODES:
            raise ConfigError(f"Unknown extension mode '{self.extension}'. Choose from {EXTENSION_MODES}")


@dataclass(frozen=True)
class SyntheticConfig:
    n_hours: int = 2160
    noise_sigma: float = 0.01
    seed: int = 0
    ar_coefficient: float = 0.7
    amplitude: float = 0.05
    growth_per_hour: float = 1e-5
    start: str = "2016-03-23T00:00:00"

    def __post_init__(self):
        if self.n_hours < 48:
            raise ConfigError(f"n_hours must be >= 48, got {self.n_hours}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not -1.0 < self.ar_coefficient < 1.0:
            raise ConfigError(f"ar_coefficient must lie in (-1, 1), got {self.ar_coefficient}")


@dataclass(frozen=True)
class TaskSpec:
    name: str = "1step"
    window_length: int = 15
    horizon: int = 1
    stride: int = 1

    def __post_init__(self):
        for key in ("window_length", "horizon", "stride"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")

    @property
    def label(self) -> str:
        return f"{self.window_length}x{self.horizon}s{self.stride}"


TASK_PRESETS: Dict[str, TaskSpec] = {
    "1step": TaskSpec("1step", 15, 1, 1),
    "2step": TaskSpec("2step", 6, 6, 6),
    "3step": TaskSpec("3step", 12, 12, 12),
}


@dataclass(frozen=True)
class ModelConfig:
    family: str = "wt-ed-lstm-am"
    encoder_sizes: Tuple[int, int] = (128, 32)
    predictor_hidden: int = 128
    gru_sizes: Tuple[int, int] = (128, 128)
    mlp_hidden: Tuple[int, ...] = (128, 64)
    layer_attention: bool = False

    def __post_init__(self):
        if self.family not in MODEL_FAMILIES:
            raise ConfigError(f"Unknown model '{self.family}'. Choose from {MODEL_FAMILIES}")
        if len(self.encoder_sizes) != 2:
            raise ConfigError(f"encoder_sizes needs two layers, got {self.encoder_sizes}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    epochs: int = 100
    pretrain_epochs: int = 100
    seed: int = 0
    clip_norm: Optional[float] = 5.0
    disable_wavelet: bool = False
    disable_attention: bool = False
    freeze_encoder: bool = False

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.pretrain_epochs < 1:
            raise ConfigError(f"pretrain_epochs must be >= 1, got {self.pretrain_epochs}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive or null, got {self.clip_norm}")


@dataclass(frozen=True)
class RunConfig:
    command: str = "train"
    data: Optional[str] = None
    synthetic: Optional[SyntheticConfig] = None
    task: TaskSpec = field(default_factory=lambda: TASK_PRESETS["1step"])
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    wavelet: WaveletConfig = field(default_factory=WaveletConfig)
    fractions: Tuple[float, float, float] = (0.70, 0.10, 0.20)
    epsilon: float = 1e-8
    bins: int = 40
    out_dir: str = OUT_DIR

    def __post_init__(self):
        if self.data is not None and self.synthetic is not None:
            raise ConfigError("Choose exactly one data source: --data or --synthetic, not both.")
        # persistence repeats the last observed SDV; denoising would leak later hours into it
        if self.model.family in RAW_INPUT_FAMILIES and (self.wavelet.enabled or not self.train.disable_wavelet):
            object.__setattr__(self, "wavelet", dataclasses.replace(self.wavelet, enabled=False))
            object.__setattr__(self, "train", dataclasses.replace(self.train, disable_wavelet=True))

    def to_dict(self) -> Dict[str, Any]:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "RunConfig":
        raw = dict(raw)
        try:
            synthetic = raw.pop("synthetic", None)
            return cls(
                command=raw.pop("command", "train"),
                data=raw.pop("data", None),
                synthetic=SyntheticConfig(**synthetic) if synthetic is not None else None,
                task=TaskSpec(**raw.pop("task", dataclasses.asdict(TASK_PRESETS["1step"]))),
                model=_model_config(raw.pop("model", {})),
                train=TrainConfig(**raw.pop("train", {})),
                wavelet=WaveletConfig(**raw.pop("wavelet", {})),
                fractions=tuple(raw.pop("fractions", (0.70, 0.10, 0.20))),
                **raw,
            )
        except TypeError as e:
            raise ConfigError(f"Invalid config entry: {e}") from e

    def config_hash(self) -> str:
        return config_hash(self.to_dict())

    @property
    def run_name(self) -> str:
        return f"{self.model.family}-{self.task.label}-{self.config_hash()}"


def _model_config(raw: Dict[str, Any]) -> ModelConfig:
    raw = dict(raw)
    for key in ("encoder_sizes", "gru_sizes", "mlp_hidden"):
        if key in raw:
            raw[key] = tuple(raw[key])
    return ModelConfig(**raw)


def config_hash(resolved: Dict[str, Any]) -> str:
    canonical = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


# ---------------------------------------------------------
# Merging: defaults <- file <- flags
# ---------------------------------------------------------
def deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"Config file does not exist: {path}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e


def resolve_run_config(file_cfg: Dict[str, Any], overrides: Dict[str, Any]) -> RunConfig:
    """
    Merge file config and flag overrides onto the defaults, then reconcile
    the model family with the ablation flags.
    """
    merged = deep_merge(deep_merge(RunConfig().to_dict(), file_cfg), overrides)
    if merged.get("synthetic") is not None:
        merged["synthetic"] = deep_merge(dataclasses.asdict(SyntheticConfig()), merged["synthetic"])
    if isinstance(merged.get("task"), str):
        merged["task"] = dataclasses.asdict(preset(merged["task"]))

    model = merged["model"]
    train = merged["train"]
    family = model["family"]
    if family not in MODEL_FAMILIES:
        raise ConfigError(f"Unknown model '{family}'. Choose from {MODEL_FAMILIES}")

    if family == "wt-ed-lstm-am":
        if train["disable_wavelet"] and train["disable_attention"]:
            raise ConfigError("--no-wavelet and --no-attention together remove both components; pick one.")
        if train["disable_wavelet"]:
            family = "ed-lstm-am"
        elif train["disable_attention"]:
            family = "wt-ed-lstm"
    elif family == "ed-lstm-am":
        if train["disable_attention"]:
            raise ConfigError("ed-lstm-am already removes the wavelet step; --no-attention is not supported.")
        train["disable_wavelet"] = True
    elif family == "wt-ed-lstm":
        if train["disable_wavelet"]:
            raise ConfigError("wt-ed-lstm already removes attention; --no-wavelet is not supported.")
        train["disable_attention"] = True
    elif train["disable_attention"]:
        raise ConfigError(f"Model '{family}' has no attention to disable.")

    model["family"] = family
    merged["wavelet"]["enabled"] = not train["disable_wavelet"]
    return RunConfig.from_dict(merged)


def preset(name: str) -> TaskSpec:
    if name not in TASK_PRESETS:
        raise ConfigError(f"Unknown task preset '{name}'. Choose from {tuple(TASK_PRESETS)}")
    return TASK_PRESETS[name]
