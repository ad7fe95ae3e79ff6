import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_nets():
    """Small double-precision bundle for loss/gradient tests (taps fit 16x16 inputs)."""
    import defreg as dr

    nets = dr.build_networks(ngf=4, reg_channels=(4, 8, 8, 16, 16),
                             layer_ids=(0, 1, 2, 3, 7), embed_dim=16, hidden_dim=16, seed=77)
    return nets.double()
