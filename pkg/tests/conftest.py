import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gdig.toylm import Example, ModelConfig, init_params

settings.register_profile("gdig", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("gdig")


@pytest.fixture
def small_config():
    return ModelConfig(embed_dim=4, context_window=3, hidden_dim=5, num_mlp_layers=2)


@pytest.fixture
def small_params(small_config):
    return init_params(small_config, 0)


def random_example(gen, idx=0, prompt_len=5, resp_len=4, vocab=259):
    return Example(f"r{idx}", gen.integers(0, vocab, prompt_len), gen.integers(0, vocab, resp_len))


@pytest.fixture
def gen():
    return np.random.default_rng(1234)
