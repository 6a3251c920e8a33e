import numpy as np
import pytest

from reidhash import tensornet as tn


@pytest.fixture
def toy_net():
    """Small net used across gradient tests: 8x8x1 -> conv -> pool -> fc."""
    config = tn.NetConfig((8, 8, 1), (tn.conv(3, 3, 1, 2), tn.pool(2, 2, 2),
                                      tn.fc(16), tn.fc(8)))
    params = tn.init_params(config, seed=7)
    return config, params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
