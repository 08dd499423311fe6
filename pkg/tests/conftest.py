import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from bnrhn.dataio import DatasetSpec, synth_dataset  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_set():
    """Small synthetic corpus shared by the slower tests."""
    return synth_dataset(DatasetSpec(n_samples=24, feature_width=8, seed=5))
