"""Memory-lean 2.5D organ segmentation on a small numpy autograd engine."""

from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    FormatError,
    GenerationError,
    RangeError,
    SegMateError,
    ShapeError,
    TrainingDiverged,
    UsageError,
)
from .model import NetworkOutput, SegMateConfig, SegMateNet, build
from .volume import MaskVolume, Volume

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataError",
    "FormatError",
    "GenerationError",
    "MaskVolume",
    "NetworkOutput",
    "RangeError",
    "SegMateConfig",
    "SegMateError",
    "SegMateNet",
    "ShapeError",
    "TrainingDiverged",
    "UsageError",
    "Volume",
    "build",
]
