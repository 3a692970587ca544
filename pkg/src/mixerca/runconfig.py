"""Experiment configuration: one JSON file drives a whole run.

A run config bundles dataset paths, architecture choices, optimizer
settings and the split protocol. Named presets carry the per-dataset
patch size, channel count and training fraction used by the standard
benchmarks; CLI flags override individual fields on top of either a
file or a preset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .model import MixerConfig
from .train import TrainConfig

# patch size / channel count / training fraction for the standard scenes
PRESETS = {
    "pu": {"patch_size": 15, "pca_count": 15, "train_fraction": 0.01},
    "sa": {"patch_size": 13, "pca_count": 20, "train_fraction": 0.005},
    "gp": {"patch_size": 7, "pca_count": 15, "train_fraction": 0.01},
    "xz": {"patch_size": 13, "pca_count": 15, "train_fraction": 0.01},
}

_FIELDS = {
    "cube", "labels", "out_dir",
    "patch_size", "pca_count", "num_classes", "stem_filters", "kernel_sizes",
    "num_blocks", "ca_reduction", "attention",
    "learning_rate", "batch_size", "max_epochs", "patience",
    "validation_fraction", "seed",
    "train_fraction", "split_overrides", "runs",
}


@dataclass(frozen=True)
class RunConfig:
    cube: Optional[str] = None
    labels: Optional[str] = None
    out_dir: str = "runs/out"
    patch_size: int = 15
    pca_count: int = 15
    num_classes: Optional[int] = None  # inferred from the label file when absent
    stem_filters: int = 64
    kernel_sizes: tuple[int, ...] = (3, 5, 7)
    num_blocks: int = 4
    ca_reduction: int = 8
    attention: str = "ca"
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 150
    patience: int = 10
    validation_fraction: float = 0.1
    seed: int = 0
    train_fraction: Optional[float] = 0.01
    split_overrides: dict = field(default_factory=dict)
    runs: int = 10

    def __post_init__(self):
        if self.runs < 1:
            raise ConfigError(f"runs must be positive, got {self.runs}")
        if self.train_fraction is not None and not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        cleaned = {}
        for key, value in dict(self.split_overrides).items():
            cls = int(key)
            count = int(value)
            if cls < 1 or count < 1:
                raise ConfigError(f"bad split override {key!r}: {value!r}")
            cleaned[cls] = count
        object.__setattr__(self, "split_overrides", cleaned)
        object.__setattr__(self, "kernel_sizes", tuple(self.kernel_sizes))

    def mixer_config(self, num_classes: Optional[int] = None) -> MixerConfig:
        resolved = num_classes if num_classes is not None else self.num_classes
        if resolved is None:
            raise ConfigError("num_classes is not set and could not be inferred")
        return MixerConfig(
            patch_size=self.patch_size,
            pca_count=self.pca_count,
            num_classes=resolved,
            stem_filters=self.stem_filters,
            kernel_sizes=self.kernel_sizes,
            num_blocks=self.num_blocks,
            ca_reduction=self.ca_reduction,
            attention=self.attention,
        )

    def train_config(self, run_index: int = 0) -> TrainConfig:
        # repeated runs shift the seed so each repetition is independent
        # but still fully determined by the base seed
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            validation_fraction=self.validation_fraction,
            seed=self.seed + run_index,
        )

    def with_overrides(self, **overrides) -> "RunConfig":
        unknown = set(overrides) - _FIELDS
        if unknown:
            raise ConfigError(f"unknown run config fields: {sorted(unknown)}")
        return replace(self, **overrides)

    def to_dict(self) -> dict:
        return {
            "cube": self.cube,
            "labels": self.labels,
            "out_dir": self.out_dir,
            "patch_size": self.patch_size,
            "pca_count": self.pca_count,
            "num_classes": self.num_classes,
            "stem_filters": self.stem_filters,
            "kernel_sizes": list(self.kernel_sizes),
            "num_blocks": self.num_blocks,
            "ca_reduction": self.ca_reduction,
            "attention": self.attention,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "validation_fraction": self.validation_fraction,
            "seed": self.seed,
            "train_fraction": self.train_fraction,
            "split_overrides": {str(k): v for k, v in sorted(self.split_overrides.items())},
            "runs": self.runs,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = set(data) - _FIELDS
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        data = dict(data)
        if "kernel_sizes" in data:
            data["kernel_sizes"] = tuple(data["kernel_sizes"])
        return cls(**data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read run config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"run config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"run config {path} must hold a JSON object")
        return cls.from_dict(data)

    @classmethod
    def preset(cls, name: str) -> "RunConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls().with_overrides(**PRESETS[name])
