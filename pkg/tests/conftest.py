import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from collectivekv import CollectiveConfig, ModelConfig, SynthConfig, generate, split  # noqa: E402
from collectivekv.attention import AttentionConfig, init_model  # noqa: E402
from collectivekv.numkit import Rng  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_model(mode="target", share_keys=True, share_values=True, tie_routers=False, d_e=8, d_u=2, d_g=6,
                m=32, seed=0, peak_weight=0.01, balance_weight=1.0):
    cfg = ModelConfig(CollectiveConfig(d_e, d_u, d_g, m, peak_weight=peak_weight, balance_weight=balance_weight,
                                       share_keys=share_keys, share_values=share_values,
                                       tie_routers=tie_routers),
                      AttentionConfig(mode))
    return cfg, init_model(cfg, Rng(seed))


@pytest.fixture(scope="session")
def tiny_data():
    ds = generate(SynthConfig(num_users=40, num_items=300, embed_dim=16, latent_rank=4, min_len=16, max_len=40,
                              seed=3))
    return ds, *split(ds, 0.75, seed=3)
