from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from hsmcfl.dataio import generate_synthetic, normalize_minmax, split
from hsmcfl.models import ArchitectureConfig, SyntheticSpec, TrainConfig

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def smoke_config() -> Path:
    return CONFIG_DIR / "smoke.toml"


@pytest.fixture
def write_csv(tmp_path):
    def _write(text: str, name: str = "data.csv") -> Path:
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path
    return _write


def _make_dataset(class_sizes, feature_count=4, drift_rate=0.0, spacing=8.0, seed=0):
    spec = SyntheticSpec(
        class_count=len(class_sizes),
        feature_count=feature_count,
        class_sizes=list(class_sizes),
        drift_rate=drift_rate,
        center_spacing=spacing,
        seed=seed,
    )
    return normalize_minmax(split(generate_synthetic(spec), seed=seed))


@pytest.fixture
def make_dataset():
    return _make_dataset


@pytest.fixture
def separable_dataset():
    """Three well-separated stationary classes, split and normalized."""
    return _make_dataset([60, 40, 30])


@pytest.fixture
def small_config() -> TrainConfig:
    return TrainConfig(
        learning_rate=3e-3,
        batch_size=16,
        epochs=2,
        num_stages=2,
        architecture=ArchitectureConfig(encoder_hidden=[16], projection_dim=8, classifier_hidden=[8]),
    )
