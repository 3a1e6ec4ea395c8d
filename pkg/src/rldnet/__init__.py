"""Relative local distance (RLD) structure-aware feature learning for person re-identification."""

from .autodiff import Tensor
from .model import ModelConfig, ParamCountReport, RLDNet, ResNetSpec, TrainConfig, count_params, train
from .rld import JointLossConfig, compute_rld, horizontal_pool, joint_loss, normalize_columns, rld_matrix

__all__ = [
    "Tensor", "ModelConfig", "ParamCountReport", "RLDNet", "ResNetSpec", "TrainConfig", "count_params", "train",
    "JointLossConfig", "compute_rld", "horizontal_pool", "joint_loss", "normalize_columns", "rld_matrix",
]

__version__ = "0.1.0"
