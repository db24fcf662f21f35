import numpy as np
import pytest

from volalign import World, WorldConfig
from volalign.autodiff import Tensor


@pytest.fixture(scope="session")
def small_world():
    return World(WorldConfig(rng_seed=7))


@pytest.fixture(scope="session")
def small_splits(small_world):
    return small_world.build_splits(24, 8)


def unit_rows(rng, n, d, dtype=np.float64):
    x = rng.standard_normal((n, d))
    return (x / np.linalg.norm(x, axis=-1, keepdims=True)).astype(dtype)


def unit_tensor(rng, shape, dtype=np.float64, requires_grad=False):
    x = rng.standard_normal(shape)
    x = x / np.linalg.norm(x, axis=-1, keepdims=True)
    return Tensor(x, requires_grad=requires_grad, dtype=dtype)
