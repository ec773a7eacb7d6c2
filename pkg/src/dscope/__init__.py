"""Critical-layer analysis and depth pruning for patch-transformer forecasters."""

from .analysis import ImportanceConfig, ImportanceReport
from .model import ForecastModel, ModelConfig, forward, predict
from .pruning import PruningPlan, importance_scores, prune_model, select_layers
from .tensor import GradTape, Tensor

__version__ = "0.1.0"

__all__ = [
    "ForecastModel",
    "GradTape",
    "ImportanceConfig",
    "ImportanceReport",
    "ModelConfig",
    "PruningPlan",
    "Tensor",
    "forward",
    "importance_scores",
    "predict",
    "prune_model",
    "select_layers",
]
