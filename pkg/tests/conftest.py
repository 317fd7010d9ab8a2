import numpy as np
import pytest

import markov_ruin as mr


@pytest.fixture(scope="session")
def iid_crit():
    # quadratic cgf -m a + sigma_sq a^2 / 2 has its positive root at
    # 2 m / sigma_sq = 2.5
    return mr.make_model("iid_lognormal", m=0.05, sigma_sq=0.04)


@pytest.fixture(scope="session")
def iid_crit_losses():
    # same discount chain, shifted exponential losses with mean -0.5
    return mr.make_model(
        "iid_lognormal",
        m=0.05,
        sigma_sq=0.04,
        loss={"dist": "exponential", "scale": 1.0, "shift": -1.5},
    )


@pytest.fixture(scope="session")
def ar1_model():
    # long-run sd 0.4 / (1 - 0.5) = 0.8, root 2 mu / 0.64 = 1.0
    return mr.make_model("ar1_log_return", c=0.5, mu=0.32, innovation_sd=0.4)


@pytest.fixture(scope="session")
def ar1_cert(ar1_model):
    return mr.minorize_model(ar1_model)


@pytest.fixture(scope="session")
def regime2():
    return mr.make_model(
        "regime_switch_lognormal",
        transition=[[0.9, 0.1], [0.1, 0.9]],
        mus=[0.06, -0.02],
        sigmas=[0.1, 0.3],
    )


@pytest.fixture(scope="session")
def garch_kesten():
    # E[xi^2] = 1 puts the Kesten root exactly at 1
    return mr.make_model("garch11", a0=1.0, a1=1.0, b1=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
