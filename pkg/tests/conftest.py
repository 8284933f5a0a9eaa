"""Shared fixtures: the desk dataset and cached trained desk runs.

Training a 64px model takes ~30-60s, so each configuration is trained at
most once per session and reused by every test that needs it.
"""

import time

import pytest

from protosolo.data import DatasetSpec, generate
from protosolo.model import ModelConfig, ProtoSoloNet
from protosolo.training import TrainConfig, train

DESK_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def desk_data():
    """Default 4-class 64px synthetic dataset (train split, test split)."""
    return generate(DatasetSpec())


def _train_desk(desk_data, seed, comparison_mode="feature_map", projection="none"):
    train_samples, _ = desk_data
    config = ModelConfig(comparison_mode=comparison_mode)
    model = ProtoSoloNet(config, seed=seed)
    train_config = TrainConfig(seed=seed, projection=projection)
    started = time.monotonic()
    checkpoint, logs = train(train_samples, model, train_config)
    elapsed = time.monotonic() - started
    return {
        "model": model,
        "checkpoint": checkpoint,
        "logs": logs,
        "seed": seed,
        "elapsed": elapsed,
    }


@pytest.fixture(scope="session")
def desk_runs(desk_data):
    """Default (non-projection, feature-map) runs keyed by seed."""
    return {seed: _train_desk(desk_data, seed) for seed in DESK_SEEDS}


@pytest.fixture(scope="session")
def projection_runs(desk_data):
    """Projection-enabled runs keyed by seed."""
    return {
        seed: _train_desk(desk_data, seed, projection="project")
        for seed in DESK_SEEDS
    }


@pytest.fixture(scope="session")
def vector_runs(desk_data):
    """Full-channel-vector comparison runs (projection), keyed by seed."""
    return {
        seed: _train_desk(
            desk_data, seed, comparison_mode="feature_vector", projection="project"
        )
        for seed in DESK_SEEDS
    }
