from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from mplpref.dataio import load_dataset, make_fixture
from mplpref.simulate import SimConfig, simulate_dataset

settings.register_profile("default", deadline=None, max_examples=200)
settings.load_profile("default")


@pytest.fixture(scope="session")
def sim_small():
    """300 heterogeneous subjects carrying the error draws as covariates."""
    ds, draws = simulate_dataset(SimConfig(n_subjects=300, seed=11))
    return ds, draws


@pytest.fixture(scope="session")
def fixture_200(tmp_path_factory):
    d = tmp_path_factory.mktemp("fx200")
    make_fixture(d, seed=3, n_subjects=200)
    ds, _ = load_dataset(choices=d / "choices.csv", covariates=d / "covariates.csv")
    return ds


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
