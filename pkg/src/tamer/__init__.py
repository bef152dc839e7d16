"""Test-time-adaptive mixture-of-experts head for clinical time-series prediction."""

from .autodiff import Tape, backward, finite_difference, forward_op
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    GenerationError,
    MetricUndefined,
    NumericError,
    ShapeError,
    TamerError,
)
from .model import Model, ModelConfig, wire_ablation
from .params import ParameterStore, count_params

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "backward",
    "finite_difference",
    "forward_op",
    "Model",
    "ModelConfig",
    "wire_ablation",
    "ParameterStore",
    "count_params",
    "TamerError",
    "ShapeError",
    "NumericError",
    "ContractError",
    "ConfigError",
    "DataError",
    "GenerationError",
    "MetricUndefined",
    "__version__",
]
