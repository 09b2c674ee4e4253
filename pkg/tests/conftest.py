import numpy as np
import pytest

from flowfold.velocity import NetConfig, TimeEmbedConfig, init_params

SMALL_TIME = TimeEmbedConfig(n_frequencies=8, omega_min=1.0, omega_max=16.0, projected_dim=16)


def tiny_config(dim=3, conditional=False, hidden=16, blocks=2, time=SMALL_TIME, cond_embed_dim=8):
    return NetConfig(dim=dim, hidden=hidden, blocks=blocks, conditional=conditional,
                     cond_embed_dim=cond_embed_dim, time=time)


def randomized_net(cfg, seed=0, dtype=np.float64):
    """Initialized net with a nonzero output head so every gradient is exercised."""
    net = init_params(cfg, seed, dtype=dtype)
    rng = np.random.default_rng(seed + 100)
    net.params["output.w"][...] = rng.normal(0, 0.3, net.params["output.w"].shape)
    net.params["output.b"][...] = rng.normal(0, 0.1, net.params["output.b"].shape)
    return net


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
