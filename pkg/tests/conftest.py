"""Shared fixtures: seeded generators, tiny grids and models, small synthetic scenes"""

import numpy as np
import pytest

from lidar_mos.cylvoxel import CylindricalGridSpec
from lidar_mos.net import ModelConfig
from lidar_mos.synth import SensorModel, generate_sequence, scenario


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec() -> CylindricalGridSpec:
    return CylindricalGridSpec(bins=(8, 8, 8), rho_range=(0.0, 20.0), z_range=(-3.0, 5.0))


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        point_feature_dim=3,
        mlp_hidden_sizes=(4,),
        stem_channels=2,
        stage_channels=(2, 3, 3),
        ddcm_kernel=3,
        refine_hidden=4,
        residual_frames=1,
        dtype="float64",
        seed=7,
    )


@pytest.fixture(scope="session")
def small_sensor() -> SensorModel:
    return SensorModel(rings=8, azimuth_bins=90, max_range=30.0)


@pytest.fixture(scope="session")
def street_sequence(small_sensor):
    return generate_sequence(scenario("street", seed=3, frames=6, sensor=small_sensor))


@pytest.fixture
def make_points(rng):
    """Factory for (n, 4) points inside a cylinder around the sensor"""
    def make(n: int, radius: float = 15.0) -> np.ndarray:
        rho = rng.uniform(0.5, radius, n)
        theta = rng.uniform(-np.pi, np.pi, n)
        z = rng.uniform(-2.5, 4.5, n)
        return np.column_stack([rho * np.cos(theta), rho * np.sin(theta), z, rng.uniform(0.0, 1.0, n)])
    return make
