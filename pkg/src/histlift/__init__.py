"""History-aware parallel spatial-temporal transformer for 2D-to-3D pose lifting."""

__version__ = "0.1.0"

from .errors import (
    BadMagicError,
    ConfigError,
    DataFormatError,
    HistliftError,
    NumericError,
    ShapeError,
    TruncatedError,
    VersionError,
)
from .metrics import EvalReport
from .model import ModelConfig, PoseLifter, load_checkpoint, save_checkpoint
from .tensor import Tensor
from .train import RunConfig, TrainConfig

__all__ = [
    "Tensor",
    "ModelConfig",
    "PoseLifter",
    "RunConfig",
    "TrainConfig",
    "EvalReport",
    "save_checkpoint",
    "load_checkpoint",
    "HistliftError",
    "ShapeError",
    "ConfigError",
    "NumericError",
    "DataFormatError",
    "BadMagicError",
    "TruncatedError",
    "VersionError",
    "__version__",
]
