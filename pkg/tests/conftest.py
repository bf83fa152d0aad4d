import numpy as np
import pytest

from cropprogress.dataset import ModelingTable, StageScheme
from cropprogress.simulate import SimConfig, simulate


@pytest.fixture(scope="session")
def scheme3():
    return StageScheme("testcrop", ("Planted", "Emerged", "Mature"))


@pytest.fixture(scope="session")
def sim_bcm_probit(scheme3):
    """Medium BCM/probit panel with known truth, shared across tests."""
    config = SimConfig(
        scheme=scheme3,
        thresholds=(1.5, 0.0, -1.5),
        slopes={"calendar": 1.2, "thermal": 0.6},
        link="probit",
        family="bcm",
        setting="thermal",
        n_trials=100,
        n_seasons=20,
        n_obs_days=15,
        seed=42,
    )
    return simulate(config)


def make_table(scheme, seasons, days, y, covariates):
    return ModelingTable(scheme, seasons, days, y, covariates)


@pytest.fixture(scope="session")
def small_table(scheme3):
    """Tiny deterministic table: 4 seasons, 6 weekly observations each."""
    rng = np.random.default_rng(11)
    seasons = np.repeat([2001, 2002, 2003, 2004], 6)
    days = np.tile(100 + 7 * np.arange(6), 4)
    cal = days.astype(float)
    thermal = np.concatenate([np.cumsum(rng.uniform(0.3, 0.9, 6)) for _ in range(4)])
    lin = 0.04 * (cal - 115) + 0.5 * (thermal - thermal.mean())
    from scipy.special import expit

    m2 = expit(1.0 + lin)
    m3 = expit(-1.0 + lin)
    y2 = np.rint(100 * m2) / 100
    y3 = np.minimum(y2, np.rint(100 * m3) / 100)
    y = np.column_stack([np.ones(len(days)), y2, y3, np.zeros(len(days))])
    scheme4 = StageScheme("tiny", ("A", "B", "C"))
    return ModelingTable(
        scheme4, seasons, days, y, {"calendar": cal, "thermal": thermal}
    )
