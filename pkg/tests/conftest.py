from pathlib import Path
from typing import Any, Callable

import numpy as np
import pytest

from tcs_fedsim.config import ExperimentConfig, RuntimeConfig
from tcs_fedsim.tensor import LayerLayout, ParamVector

GOLDEN_DIR = Path(__file__).parent / "golden"


def read_golden(name: str) -> bytes:
    """Hex text with '#' comment lines and free whitespace"""
    lines = (GOLDEN_DIR / name).read_text().splitlines()
    return bytes.fromhex("".join("".join(line.split()) for line in lines if not line.startswith("#")))


BASE_CONFIG = dict(
    seed=7,
    num_clients=4,
    local_steps=1,
    epochs=3,
    batch_size=16,
    scheme="dense",
    base_lr=0.1,
    reference_batch=64,
    warmup_epochs=0,
    milestones=[],
    weight_decay=0.0,
    model="logreg",
    dataset="synthetic",
    num_classes=3,
    num_features=5,
    num_samples=240,
    cluster_spread=0.5,
    test_fraction=0.25,
)


@pytest.fixture
def make_config() -> Callable[..., ExperimentConfig]:
    """Small synthetic experiment; keyword arguments override fields"""

    def factory(**overrides: Any) -> ExperimentConfig:
        return ExperimentConfig(**{**BASE_CONFIG, **overrides})

    return factory


@pytest.fixture
def runtime() -> RuntimeConfig:
    return RuntimeConfig(threads=1, log_level="INFO", record_wall_time=False)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def two_layer_layout() -> LayerLayout:
    return LayerLayout((4, 4), ("a", "b"))


@pytest.fixture
def random_vector(rng) -> Callable[[LayerLayout], ParamVector]:
    def factory(layout: LayerLayout) -> ParamVector:
        return ParamVector(rng.standard_normal(layout.d), layout)

    return factory


@pytest.fixture
def golden() -> Callable[[str], bytes]:
    return read_golden
