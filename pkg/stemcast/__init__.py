from .config import RunConfig, TaskSpec, TrainConfig, WaveletConfig
from .training import fit, run_ablation

__all__ = ["RunConfig", "TaskSpec", "TrainConfig", "WaveletConfig", "fit", "run_ablation"]
