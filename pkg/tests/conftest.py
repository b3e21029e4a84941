import numpy as np
import pytest

from mmdpose.skeleton import DEFAULT_TOPOLOGY
from mmdpose.synth import CameraModel, SynthConfig, make_dataset, sample_pose, sample_rng


@pytest.fixture(scope="session")
def topo():
    return DEFAULT_TOPOLOGY


@pytest.fixture(scope="session")
def synth_cfg():
    return SynthConfig.default(seed=11, count=900)


@pytest.fixture(scope="session")
def small_ds(synth_cfg):
    return make_dataset(synth_cfg, CameraModel.default())


@pytest.fixture(scope="session")
def poses(synth_cfg):
    """Root-relative sampled poses (200, J, 3)."""
    return np.stack([sample_pose(synth_cfg, sample_rng(5, i), i % 15) for i in range(200)])
