"""
Shared fixtures for the laboratory test suite
"""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from config import ModelSection  # noqa: E402
from model_core import DemandParams, ModelParamsClassic  # noqa: E402
from panel_synth import SynthConfig, simulate_reduced_form_panel, simulate_structural_panel  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run Monte Carlo acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def calibrated():
    return ModelSection().calibration()


@pytest.fixture(scope="session")
def gmm_params():
    return ModelSection().gmm_params()


@pytest.fixture(scope="session")
def demand():
    return DemandParams()


@pytest.fixture
def classic_params():
    """delta=2, A_s=2, A_u=1, rho_s=2, rho_u=1"""
    return ModelParamsClassic(gamma_disutility=1.0, rho_s=2.0, rho_u=1.0, delta=2.0, a_s=2.0, a_u=1.0)


@pytest.fixture
def reduced_form_panel():
    cfg = SynthConfig(n_counties=50, n_years=5, n_districts=10, n_states=5, dgp_kind="reduced_form",
                      rng_seed=11, br_rate=1.5)
    return simulate_reduced_form_panel(cfg)


@pytest.fixture
def structural_panel(gmm_params, demand):
    cfg = SynthConfig(n_counties=80, n_years=6, n_districts=16, n_states=4, dgp_kind="structural",
                      rng_seed=5, br_rate=2.0)
    return simulate_structural_panel(cfg, gmm_params, demand)


@pytest.fixture
def noiseless_panel(gmm_params, demand):
    cfg = SynthConfig(n_counties=60, n_years=6, n_districts=12, n_states=4, dgp_kind="structural",
                      rng_seed=3, br_rate=2.0, noise_sd_logemp=0.0, noise_sd_logwage=0.0)
    return simulate_structural_panel(cfg, gmm_params, demand)
