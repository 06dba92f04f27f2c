import numpy as np
import pytest

from plutonet import data as pdata


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Deterministic 12-pair synthetic corpus shared across tests."""
    root = tmp_path_factory.mktemp("corpus") / "synth12"
    pdata.generate_synthetic(12, seed=7, out_dir=root)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
