import numpy as np
import pytest

from stylefusion.models.config import DssiConfig, PipelineConfig
from stylefusion.models.tensors import TokenBlocks
from stylefusion.services.verification import random_qkv
from stylefusion.utils.linalg import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def small_config():
    """A pipeline small enough to run dozens of seeds per test."""
    return PipelineConfig(d=8, N_p=4, N_s=8, N_o=16, layers=2, seed=7)


@pytest.fixture
def small_qkv(rng):
    return random_qkv((4, 6, 8), 5, rng)


@pytest.fixture
def dssi_config():
    return DssiConfig()


def make_blocks(rng, counts=(3, 4, 5), d=6):
    """Random token blocks with no masked rows."""
    n_p, n_s, n_o = counts
    return TokenBlocks(
        x_p=rng.standard_normal((n_p, d)),
        x_s=(rng.standard_normal((n_s, d)),),
        x_o=rng.standard_normal((n_o, d)),
        mask_o=np.zeros(n_o, dtype=np.int8),
    )


@pytest.fixture
def blocks_factory():
    return make_blocks
