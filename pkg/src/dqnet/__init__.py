"""Camouflaged-object segmentation with ViT queries into CNN detail features, in numpy."""
from .autograd import Tensor, no_grad
from .cnn import CnnConfig
from .data import Sample, SynthConfig, augment, gen_synthetic, load_dataset
from .fusion import RBQ, rbq_cost
from .gradcheck import GradReport, grad_check
from .losses import LossConfig, total_loss
from .metrics import MetricReport, e_measure, evaluate_dataset, mae, s_measure, weighted_f
from .model import DQNet, ModelConfig
from .vit import TokenGrid, VitConfig

__version__ = "0.1.0"

__all__ = [
    "CnnConfig",
    "DQNet",
    "GradReport",
    "LossConfig",
    "MetricReport",
    "ModelConfig",
    "RBQ",
    "Sample",
    "SynthConfig",
    "Tensor",
    "TokenGrid",
    "VitConfig",
    "augment",
    "e_measure",
    "evaluate_dataset",
    "gen_synthetic",
    "grad_check",
    "load_dataset",
    "mae",
    "no_grad",
    "rbq_cost",
    "s_measure",
    "total_loss",
    "weighted_f",
]
