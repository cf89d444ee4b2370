"""Multiple instance learning with gated attention, self-distillation and 2-D positional encoding."""

from .data import Bag, DatasetManifest, read_bags, write_bags
from .model import MILModel, ModelConfig, forward
from .training import TrainConfig, fit, fit_holdout

__version__ = "0.1.0"

__all__ = [
    "Bag",
    "DatasetManifest",
    "MILModel",
    "ModelConfig",
    "TrainConfig",
    "fit",
    "fit_holdout",
    "forward",
    "read_bags",
    "write_bags",
]
