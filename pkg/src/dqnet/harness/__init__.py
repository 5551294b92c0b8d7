"""Training, evaluation, ablation sweeps, checkpoints and the command line."""
from .ablate import ablate
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import TrainConfig, load_config
from .optim import AdamW, poly_lr
from .train import evaluate, evaluate_samples, train

__all__ = [
    "AdamW",
    "Checkpoint",
    "CheckpointError",
    "TrainConfig",
    "ablate",
    "evaluate",
    "evaluate_samples",
    "load_checkpoint",
    "load_config",
    "poly_lr",
    "save_checkpoint",
    "train",
]
