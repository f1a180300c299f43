import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from detal.core import Config
from detal.synthgen import SynthConfig, generate_dataset

settings.register_profile("default", max_examples=100, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(SynthConfig(num_videos=3, num_test_videos=2, T_range=(80, 100),
                                        instances_per_video_range=(1, 3), seed=3))


@pytest.fixture
def tiny_config():
    return Config(epochs_stage1=2, epochs_stage2=2, N_p=4)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
