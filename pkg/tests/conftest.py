"""Shared fixtures: toy design spaces, short synthetic traces and tiny models."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from cpudse.modules.datagen import build_dataset
from cpudse.modules.design_space import default_space, enumerate_configs, sample_config, select_params
from cpudse.modules.trace import PRESET_PROFILES, build_dictionary, chunk_trace, generate_synthetic_trace, tokenize_chunk
from cpudse.schemas import ModelConfig

TOY_PARAMS = ["icache line size", "icache size (kb)", "icache associativity"]
TINY_S = 32


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end checks that take minutes")


@pytest.fixture(scope="session")
def catalog():
    return default_space()


@pytest.fixture(scope="session")
def toy_space(catalog):
    """Three Imem parameters, 2 x 6 x 4 = 48 configurations."""
    return select_params(catalog, TOY_PARAMS)


@pytest.fixture(scope="session")
def records():
    return generate_synthetic_trace(PRESET_PROFILES["balanced"], 4 * TINY_S)


@pytest.fixture(scope="session")
def chunks(records):
    return chunk_trace(records, TINY_S)


@pytest.fixture(scope="session")
def dictionary(records):
    return build_dictionary(records, reserve_unknown=True)


@pytest.fixture(scope="session")
def tokens_by_chunk(chunks, dictionary):
    return {c.id: tokenize_chunk(c, dictionary, TINY_S) for c in chunks}


@pytest.fixture(scope="session")
def tiny_config(dictionary):
    return ModelConfig(s=TINY_S, d=8, heads=2, encoder_layers=1, head_layers=2, window=4,
                       vocab=dictionary.vocab)


@pytest.fixture(scope="session")
def toy_configs(toy_space):
    rng = np.random.default_rng(0)
    picked = {}
    while len(picked) < 6:
        cfg = sample_config(toy_space, rng)
        picked.setdefault(cfg.ranks, cfg)
    return list(picked.values())


@pytest.fixture(scope="session")
def toy_dataset(chunks, toy_configs, toy_space, dictionary):
    return build_dataset(chunks, toy_configs, toy_space, dictionary, TINY_S)


@pytest.fixture(scope="session")
def all_toy_configs(toy_space):
    return list(enumerate_configs(toy_space))
