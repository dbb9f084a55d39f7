"""Test configuration and fixtures."""

import os

import numpy as np
import pytest

# Keep the environment from leaking into config resolution
os.environ.pop("DERIVWATCH_CONFIG", None)
os.environ.pop("DERIVWATCH_RUNS_DIR", None)
os.environ["SOURCE_DATE_EPOCH"] = "0"

from derivwatch.config import ExperimentConfig  # noqa: E402
from derivwatch.prep import Dataset, clean  # noqa: E402
from derivwatch.sim import (  # noqa: E402
    FaultKind,
    FaultSpec,
    LoadProfile,
    SensorModel,
    generate_profile,
    inject_fault,
)


@pytest.fixture
def sensors():
    """Three low-noise channels driven by rpm and power."""
    return [
        SensorModel(channel_id="pressure", const=2.0, rpm=1e-3, noise_std=0.005),
        SensorModel(channel_id="flow", const=10.0, power=2e-3, noise_std=0.01),
        SensorModel(
            channel_id="temperature",
            const=50.0,
            rpm=5e-3,
            power=1e-3,
            noise_std=0.02,
        ),
    ]


@pytest.fixture
def profile():
    """A 600 s single sweep sampled every second."""
    return LoadProfile.ramp(
        duration_s=600.0,
        rpm_range=(600.0, 1800.0),
        power_range=(400.0, 4000.0),
        hold_fraction=0.2,
        cycles=1,
    )


@pytest.fixture
def healthy(profile, sensors):
    return generate_profile(profile, sensors, seed=1)


@pytest.fixture
def step_fault():
    return FaultSpec(
        kind=FaultKind.CATASTROPHIC_STEP,
        target_channels=["pressure", "flow"],
        onset_s=450.0,
        magnitude=0.2,
        mode="relative",
    )


@pytest.fixture
def faulty(profile, sensors, step_fault):
    return inject_fault(generate_profile(profile, sensors, seed=3), step_fault)


@pytest.fixture
def dataset(healthy) -> Dataset:
    return clean(healthy)


@pytest.fixture
def linear_dataset() -> Dataset:
    """Noise-free targets that are exact linear maps of the inputs."""
    rng = np.random.default_rng(0)
    X = np.column_stack([rng.uniform(600, 1800, 200), rng.uniform(400, 4000, 200)])
    Y = np.column_stack([1.0 + 0.002 * X[:, 0], 3.0 + 0.001 * X[:, 1]])
    return Dataset.from_arrays(X, Y, ("a", "b")).fit_scalers()


@pytest.fixture(scope="session")
def small_config() -> ExperimentConfig:
    """A whole experiment that finishes in seconds."""
    data = {
        "seed": 7,
        "simulation": {
            "profile": LoadProfile.ramp(
                duration_s=1200.0,
                rpm_range=(600.0, 1800.0),
                power_range=(400.0, 4000.0),
                hold_fraction=0.1,
                cycles=2,
            ).model_dump(mode="json"),
            "sensors": [
                {
                    "channel_id": "pressure",
                    "const": 2.0,
                    "rpm": 1e-3,
                    "noise_std": 0.005,
                },
                {"channel_id": "flow", "const": 10.0, "power": 2e-3, "noise_std": 0.01},
                {
                    "channel_id": "temperature",
                    "const": 50.0,
                    "rpm": 5e-3,
                    "noise_std": 0.02,
                },
            ],
            "fault": {
                "kind": "catastrophic_step",
                "target_channels": ["pressure", "flow"],
                "onset_s": 900.0,
                "magnitude": 0.2,
                "mode": "relative",
            },
        },
        "prep": {"window_seconds": 30.0, "top_k": 2, "min_deviation_pct": 2.0},
        "augmentation": {
            "enabled": True,
            "ratio": 0.25,
            "vae": {"hidden_width": 8, "latent_dim": 2, "epochs": 5},
        },
        "models": {
            "forest": {"n_estimators": 5},
            "network": {"hidden_layers": [8], "epochs": 3, "batch_size": 32},
        },
        "baseline": {"max_train_samples": 200},
    }
    return ExperimentConfig.model_validate(data)
