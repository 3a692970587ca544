"""Hyperspectral patch classification with depthwise mixing and coordinate attention.

A from-scratch training and inference engine: numpy-backed tensors,
hand-derived gradients verified by finite differences, PCA and patch
preprocessing, seeded training with early stopping, accuracy and
significance statistics, and deterministic binary formats for datasets,
checkpoints and classification maps.
"""

from .errors import (
    ConfigError,
    CorruptionError,
    DegenerateSampleError,
    DegenerateStatisticsError,
    FormatError,
    InputError,
    MixerError,
    ShapeError,
    SplitError,
    UndefinedClassError,
    UsageError,
    VersionError,
)
from .model import MixerConfig, init_bn_state, init_params, model_forward
from .preprocess import HsiCube, LabelMap, PatchSet, PcaModel
from .runconfig import RunConfig
from .train import TrainConfig, train_loop

__all__ = [
    "ConfigError",
    "CorruptionError",
    "DegenerateSampleError",
    "DegenerateStatisticsError",
    "FormatError",
    "HsiCube",
    "InputError",
    "LabelMap",
    "MixerConfig",
    "MixerError",
    "PatchSet",
    "PcaModel",
    "RunConfig",
    "ShapeError",
    "SplitError",
    "TrainConfig",
    "UndefinedClassError",
    "UsageError",
    "VersionError",
    "init_bn_state",
    "init_params",
    "model_forward",
    "train_loop",
]

__version__ = "0.1.0"
