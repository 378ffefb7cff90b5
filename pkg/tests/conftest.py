import numpy as np
import pytest

from viact.geometry import Clip, PointTrajectorySet
from viact.mae import AnatomicalMAE, DecoderConfig
from viact.model import ModelConfig, ViACT
from viact.phantom import PhantomSpec, generate_cohort


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_config():
    return ModelConfig.preset('micro')


@pytest.fixture
def micro_model(micro_config):
    return ViACT(micro_config, seed=0)


@pytest.fixture
def micro_mae(micro_model):
    return AnatomicalMAE(micro_model, DecoderConfig.preset('micro'), seed=0)


@pytest.fixture
def micro_clip(rng):
    return Clip(rng.uniform(0.0, 1.0, size=(2, 8, 8)))


@pytest.fixture
def micro_points(rng):
    return PointTrajectorySet(rng.uniform(2.0, 5.0, size=(2, 3, 2)), apex_index=1)


@pytest.fixture
def small_spec():
    "64 x 64 phantom with one 21 point centerline."
    return PhantomSpec(height=64, width=64, frames=10, points=21, seed=3)


@pytest.fixture
def desk_config():
    "Window of 4 frames over 21 points with 4 x 4 patches."
    return ModelConfig(embed_dim=8, heads=2, depth=1, mlp_hidden=16, patch_size=4, frames=4, points=21)


@pytest.fixture(scope='session')
def small_cohort():
    "Ten 64 x 64 phantoms of 10 frames, enough for a 4 frame window at stride 3."
    return generate_cohort(10, 5, PhantomSpec(height=64, width=64, frames=10, points=21), workers=2)
