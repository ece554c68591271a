"""
Shared fixtures and hypothesis profiles.

Select a profile with HYPOTHESIS_PROFILE=ci (default: fast).
"""

import os

import hypothesis
import numpy as np
import pytest

from harness.experiment import load_config
from spankey.data import gen_synthetic
from spankey.keyspace import build_keyspace
from spankey.nn_core import init_network

hypothesis.settings.register_profile("fast", max_examples=20, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=100, deadline=None)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "fast"))

TINY_RUN = [
    "DATA_N=200",
    "DATA_DIM=8",
    "DATA_CLASSES=3",
    "DATA_SEPARATION=4.0",
    "NET_HIDDEN=12,10",
    "INJECT_SITES=0+1",
    "INJECT_GAMMA=1.0",
    "KEY_M=2",
    "RUN_EPOCHS=2",
    "RUN_BATCH_SIZE=32",
    "RUN_EVAL_BATCH_SIZE=50",
    "RUN_ABSORPTION_INPUTS=20",
    "RUN_SEED=3",
    "RUN_ID=tiny",
]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def relu_net():
    """5 -> 7 -> 6 -> 3 ReLU network."""
    return init_network([5, 7, 6, 3], "relu", "plain_C", seed=42)


@pytest.fixture
def tanh_net():
    return init_network([5, 7, 6, 3], "tanh", "plain_C", seed=7)


@pytest.fixture
def site_keyspace():
    """Key space for sites 0 (width 7) and 1 (width 6)."""
    return build_keyspace({0: 7, 1: 6}, 2, seed=11)


@pytest.fixture
def blobs():
    return gen_synthetic(n=300, d=8, C=3, separation=4.0, seed=5)


@pytest.fixture
def output_root(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv("SPANKEY_OUTPUT_ROOT", str(root))
    return root


@pytest.fixture
def tiny_config():
    """Factory for a seconds-long synthetic experiment with extra overrides."""

    def make(*extra: str):
        return load_config(None, [*TINY_RUN, *extra], use_env=False)

    return make
