"""Experiment configuration with desk and full-scale profiles.

The desk profile (the constructor defaults) runs the whole pipeline on a
single workstation core in minutes: 4 atoms, synthetic glyphs, a narrow
encoder.  ``paper_profile`` returns the overrides for the full-scale
setup: 8 atoms, MNIST glyphs, the reference encoder, 20000-instance
training splits, and a 500-generation budget.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .evolution import EvolveSettings
from .net import EncoderArch
from .organism import TrainSettings

__all__ = ["ExperimentConfig", "ConfigError", "paper_profile"]

MODES = ("evolve", "baseline", "datagen", "validate-perf")
GLYPH_SOURCES = ("synthetic", "mnist")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def paper_profile() -> dict:
    """Overrides reproducing the full-scale experimental setup."""
    return {
        "n_atoms": 8,
        "train_size": 20000,
        "val_size": 2000,
        "test_size": 2000,
        "max_generations": 500,
        "batch_size": 2000,
        "conv_channels": (8, 16),
        "fc_dims": (120, 84),
        "baseline_epochs": 100,
        "glyphs": "mnist",
    }


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "evolve"
    # problem scale
    n_atoms: int = 4
    train_size: int = 2000
    val_size: int = 500
    test_size: int = 500
    # evolutionary search
    max_generations: int = 100
    threshold: float = 0.0
    selection_exponent: int = 2
    rule_additions: int = 5
    early_stop_correct: float = 0.99
    # organism training
    epochs: int = 5
    batch_size: int = 2000
    reconstruction_ratio: float = 0.0
    cache: bool = True
    dtype: str = "float32"
    conv_channels: tuple[int, int] = (4, 8)
    fc_dims: tuple[int, int] = (48, 24)
    # baseline
    baseline_epochs: int = 50
    # data
    glyphs: str = "synthetic"
    glyph_pool: int = 32
    glyph_noise: float = 0.2
    mnist_dir: str | None = None
    data_dir: str | None = None
    # run matrix
    seed: int = 0
    seeds: int = 1
    policies: int = 1
    workers: int = 0
    # performance validation
    perf_organisms: int = 12
    out_dir: str = "results"

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.glyphs not in GLYPH_SOURCES:
            raise ConfigError(f"glyphs must be one of {GLYPH_SOURCES}")
        positive = {
            "n_atoms": self.n_atoms,
            "train_size": self.train_size,
            "val_size": self.val_size,
            "test_size": self.test_size,
            "batch_size": self.batch_size,
            "selection_exponent": self.selection_exponent,
            "seeds": self.seeds,
            "policies": self.policies,
            "glyph_pool": self.glyph_pool,
            "baseline_epochs": self.baseline_epochs,
            "perf_organisms": self.perf_organisms,
        }
        for name, value in positive.items():
            if value < 1:
                raise ConfigError(f"{name} must be positive, got {value}")
        nonnegative = {
            "max_generations": self.max_generations,
            "threshold": self.threshold,
            "rule_additions": self.rule_additions,
            "epochs": self.epochs,
            "reconstruction_ratio": self.reconstruction_ratio,
            "workers": self.workers,
        }
        for name, value in nonnegative.items():
            if value < 0:
                raise ConfigError(f"{name} must be nonnegative, got {value}")
        if not 0.0 <= self.glyph_noise < 0.5:
            raise ConfigError("glyph_noise must be in [0, 0.5)")
        if not 0.0 < self.early_stop_correct <= 1.0:
            raise ConfigError("early_stop_correct must be in (0, 1]")
        if self.glyphs == "mnist" and not self.mnist_dir and not self.data_dir:
            raise ConfigError("mnist glyphs require --mnist-dir (or a prebuilt --data)")
        try:
            np.dtype(self.dtype)
        except TypeError as err:
            raise ConfigError(f"bad dtype {self.dtype!r}") from err

    def arch(self) -> EncoderArch:
        return EncoderArch(
            conv_channels=tuple(self.conv_channels), fc_dims=tuple(self.fc_dims)
        )

    def train_settings(self) -> TrainSettings:
        return TrainSettings(
            epochs=self.epochs,
            batch_size=self.batch_size,
            reconstruction_ratio=self.reconstruction_ratio,
            cache_enabled=self.cache,
        )

    def evolve_settings(self, master_seed: int, workers: int | None = None) -> EvolveSettings:
        return EvolveSettings(
            max_generations=self.max_generations,
            threshold=self.threshold,
            selection_exponent=self.selection_exponent,
            rule_additions=self.rule_additions,
            early_stop_correct=self.early_stop_correct,
            train=self.train_settings(),
            master_seed=master_seed,
            workers=self.workers if workers is None else workers,
            arch=self.arch(),
            dtype=self.dtype,
        )

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ConfigError(f"unknown configuration fields: {sorted(unknown)}")
        return replace(self, **overrides)
