import pytest

from selftrain import ModelConfig, Vocab, gen_copy_task, init_params


@pytest.fixture(scope="session")
def vocab():
    return Vocab.default()


@pytest.fixture(scope="session")
def tiny_config():
    # Small enough for fast unit tests; vocab matches the default vocab.
    return ModelConfig(n_layers=2, n_heads=2, d_model=32, d_ff=64, context_len=96, vocab_size=44)


@pytest.fixture(scope="session")
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=123)


@pytest.fixture(scope="session")
def copy_data():
    return gen_copy_task(24, min_len=3, max_len=6, seed=5)
