"""Forward-only token optimization on a quantized toy denoiser."""

from .config import TrainConfig, load_config
from .estimators import EstimatorConfig, estimate, estimate_one_point, estimate_rge, estimate_spsa, replay_probe
from .trainer import load_checkpoint, save_checkpoint, train

__all__ = [
    "EstimatorConfig", "TrainConfig", "estimate", "estimate_one_point", "estimate_rge", "estimate_spsa",
    "load_checkpoint", "load_config", "replay_probe", "save_checkpoint", "train",
]
__version__ = "0.1.0"
