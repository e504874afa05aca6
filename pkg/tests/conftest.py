from __future__ import annotations

import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rnnt_aux.data import SyntheticTaskSpec, collate, generate_dataset
from rnnt_aux.model import ModelConfig, init_params

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_log_grid(rng, T, U, V, scale=2.0):
    z = rng.normal(size=(T, U + 1, V)) * scale
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    """Narrow model, fast enough for per-test gradient checks."""
    return ModelConfig(input_dim=6, encoder_layers=3, encoder_hidden=5, subsample_after=(1,),
                       pred_hidden=4, joint_hidden=7, vocab_size=5, aux_taps=(1, 2), ce_taps=(2, 3),
                       aux_mlp_hidden=6, state_vocab_size=20)


@pytest.fixture(scope="session")
def tiny_data():
    spec = SyntheticTaskSpec(base_symbols=4, feature_dim=6, u_min=1, u_max=4, dur_min=1, dur_max=2, seed=3)
    return generate_dataset(spec, 12)


@pytest.fixture(scope="session")
def tiny_batch(tiny_data):
    return collate(tiny_data.utterances[:3])


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=7)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
