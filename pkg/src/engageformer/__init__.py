"""Three-view video transformer for affective-state classification, built on a small numpy autodiff."""

from .model import ModelConfig, count_params, forward, init_params, predict, shape_ledger
from .training import TrainConfig, gradcheck, toy_config, train

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "count_params",
    "forward",
    "gradcheck",
    "init_params",
    "predict",
    "shape_ledger",
    "toy_config",
    "train",
]
