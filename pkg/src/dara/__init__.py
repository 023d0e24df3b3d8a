"""Domain-aware and relation-aware adapters for visual grounding, on a
small float64 autodiff engine."""

from .adapters import DAAdapter, RAAdapter, SharedWeightRegistry, da_forward, ra_forward
from .boxes import accuracy_at_05, giou, iou
from .config import RunConfig
from .errors import (ConfigError, ContractError, DaraError, DataError, GenerationError,
                     RegistryError, ShapeError)
from .model import GroundingModel, ModelConfig
from .report import count_params, enumerate_params, updated_ratio, average_delta
from .tensor import Tape, Tensor, backward
from .train import LossWeights, TaskConfig, TrainPlan, run_two_phase

__version__ = "0.1.0"

__all__ = [
    "DAAdapter", "RAAdapter", "SharedWeightRegistry", "da_forward", "ra_forward",
    "accuracy_at_05", "giou", "iou", "RunConfig",
    "ConfigError", "ContractError", "DaraError", "DataError", "GenerationError",
    "RegistryError", "ShapeError", "GroundingModel", "ModelConfig",
    "count_params", "enumerate_params", "updated_ratio", "average_delta",
    "Tape", "Tensor", "backward", "LossWeights", "TaskConfig", "TrainPlan", "run_two_phase",
]
