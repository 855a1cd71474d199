"""Multi-path refinement networks for semantic segmentation, built on a
small numpy autodiff engine."""

from .cascade import CascadeSpec, RefineNet, build, count_params, load_checkpoint, save_checkpoint
from .engine import Tensor, no_grad
from .errors import (CheckpointMismatch, ConfigError, FormatError, LabelError, RefineryError,
                     ShapeError, TrainingDiverged)

__version__ = "0.1.0"

__all__ = [
    "CascadeSpec", "RefineNet", "build", "count_params", "load_checkpoint", "save_checkpoint",
    "Tensor", "no_grad", "CheckpointMismatch", "ConfigError", "FormatError", "LabelError",
    "RefineryError", "ShapeError", "TrainingDiverged",
]
